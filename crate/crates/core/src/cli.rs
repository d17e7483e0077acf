//! Command-line front end: `synth`, `fit`, `predict`, `learning-curve` and
//! `evaluate`.
//!
//! Settings are flat `key = value` pairs. Every key has a default (see
//! [`DEFAULTS`]); a `--config` file and dotted `--key value` flags override
//! them in that order, and `--seed` overrides `seed`. Unknown keys are
//! rejected.
//!
//! Artifact-producing commands write a JSON manifest next to their output
//! (`<out>.meta.json`, or `meta.json` inside a learning-curve directory)
//! holding the resolved settings, seed, SHA-256 digests of the inputs and
//! start/finish timestamps.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{
    confidence_interval, fit_ensemble, make_plan, BaseKind, Ensemble, EnsembleConfig,
    PredictionInterval, ResampleKind,
};
use crate::error::{Error, Result};
use crate::evalx::{
    coverage, default_methods, export_curve, mean_curve, method_by_name, rmse, run_learning_curve,
    ExperimentSettings, LearningCurve, MethodSpec, Schedule, METHOD_NAMES,
};
use crate::features::ProjectionKind;
use crate::linmodel::{fit_pls_cv, PlsRegModel};
use crate::mlp::TrainConfig;
use crate::pipeline::{PreprocessConfig, Preprocessor, SgSettings};
use crate::preprocess::build_sg;
use crate::spectra::{load_sampleset, save_sampleset, write_atomic, SampleSet};
use crate::synthgen::{generate, GenConfig};

pub const MODEL_FORMAT: &str = "nircal-model";
pub const MODEL_VERSION: u32 = 1;

/// Every accepted key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("synth.n_samples", "493"),
    ("synth.n_points", "426"),
    ("synth.wn_lo", "7600"),
    ("synth.wn_hi", "11000"),
    ("synth.c1_lo", "0"),
    ("synth.c1_hi", "3"),
    ("synth.c2_lo", "0"),
    ("synth.c2_hi", "7"),
    ("synth.temp_lo", "20"),
    ("synth.temp_hi", "40"),
    ("synth.temp_shift", "10"),
    ("synth.temp_width", "0.01"),
    ("synth.noise_sd", "0.05"),
    ("synth.baseline_drift", "0.00001"),
    ("preprocess.range_lo", "7600"),
    ("preprocess.range_hi", "11000"),
    ("preprocess.baseline_order", "1"),
    ("preprocess.msc", "false"),
    ("preprocess.sg", "false"),
    ("preprocess.sg_window", "11"),
    ("preprocess.sg_poly", "2"),
    ("preprocess.sg_deriv", "0"),
    ("features.kind", "pls_x"),
    ("features.k", "5"),
    ("features.temperature", "true"),
    ("features.refit_per_member", "false"),
    ("mlp.hidden", "10"),
    ("mlp.max_epochs", "20"),
    ("mlp.restarts", "10"),
    ("mlp.lambda0", "0.01"),
    ("mlp.lm_factor", "10"),
    ("ensemble.kind", "bootstrap"),
    ("ensemble.base", "mlp"),
    ("ensemble.n_models", "70"),
    ("ensemble.holdout", "0.2"),
    ("pls.max_factors", "15"),
    ("pls.folds", "10"),
    ("fit.components", "all"),
    ("predict.alpha", "2"),
    ("curve.start", "27"),
    ("curve.step", "30"),
    ("curve.stop", "267"),
    ("curve.sizes", "all"),
    ("curve.methods", "default"),
    ("curve.n_models", "70"),
    ("curve.components", "all"),
    ("curve.repeat", "1"),
];

/// Resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::config(key, "unknown key")),
        }
    }

    /// Applies a `key = value` file. Blank lines and lines starting with `#`
    /// are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", i + 1), "expected `key = value`")
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("no default for `{key}`"))
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(Error::config(
                key,
                format!("expected true or false, got `{v}`"),
            )),
        }
    }

    fn at_least(&self, key: &str, min: usize) -> Result<usize> {
        let v: usize = self.parse(key)?;
        if v < min {
            return Err(Error::config(key, format!("must be at least {min}")));
        }
        Ok(v)
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn gen_config(&self) -> Result<GenConfig> {
        let pair =
            |lo: &str, hi: &str| -> Result<(f64, f64)> { Ok((self.parse(lo)?, self.parse(hi)?)) };
        let cfg = GenConfig {
            n_samples: self.parse("synth.n_samples")?,
            n_points: self.parse("synth.n_points")?,
            wn_lo: self.parse("synth.wn_lo")?,
            wn_hi: self.parse("synth.wn_hi")?,
            c1_range: pair("synth.c1_lo", "synth.c1_hi")?,
            c2_range: pair("synth.c2_lo", "synth.c2_hi")?,
            temp_range: pair("synth.temp_lo", "synth.temp_hi")?,
            temp_shift: self.parse("synth.temp_shift")?,
            temp_width: self.parse("synth.temp_width")?,
            noise_sd: self.parse("synth.noise_sd")?,
            baseline_drift: self.parse("synth.baseline_drift")?,
            seed: self.seed()?,
            ..GenConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preprocess_config(&self) -> Result<PreprocessConfig> {
        let range_lo: f64 = self.parse("preprocess.range_lo")?;
        let range_hi: f64 = self.parse("preprocess.range_hi")?;
        if !(range_lo < range_hi) {
            return Err(Error::config(
                "preprocess.range_lo",
                "must be below preprocess.range_hi",
            ));
        }
        let baseline_order = match self.get("preprocess.baseline_order") {
            "none" => None,
            _ => Some(self.parse("preprocess.baseline_order")?),
        };
        let sg = if self.flag("preprocess.sg")? {
            let s = SgSettings {
                window: self.parse("preprocess.sg_window")?,
                poly: self.parse("preprocess.sg_poly")?,
                deriv: self.parse("preprocess.sg_deriv")?,
            };
            build_sg(s.window, s.poly, s.deriv)
                .map_err(|e| Error::config("preprocess.sg_window", e.to_string()))?;
            Some(s)
        } else {
            None
        };
        Ok(PreprocessConfig {
            range_lo,
            range_hi,
            baseline_order,
            msc: self.flag("preprocess.msc")?,
            sg,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            max_epochs: self.parse("mlp.max_epochs")?,
            n_restarts: self.parse("mlp.restarts")?,
            lm_lambda0: self.parse("mlp.lambda0")?,
            lm_factor: self.parse("mlp.lm_factor")?,
            seed: self.seed()?,
            stream: 0,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn projection(&self) -> Result<ProjectionKind> {
        self.get("features.kind").parse()
    }

    pub fn ensemble_config(&self) -> Result<EnsembleConfig> {
        Ok(EnsembleConfig {
            base: match self.base()? {
                FitBase::Linear => BaseKind::Linear,
                _ => BaseKind::Mlp,
            },
            projection: self.projection()?,
            k: self.at_least("features.k", 1)?,
            include_temperature: self.flag("features.temperature")?,
            refit_per_member: self.flag("features.refit_per_member")?,
            n_hidden: self.at_least("mlp.hidden", 1)?,
            train: self.train_config()?,
        })
    }

    pub fn base(&self) -> Result<FitBase> {
        match self.get("ensemble.base") {
            "mlp" => Ok(FitBase::Mlp),
            "linear" => Ok(FitBase::Linear),
            "pls_baseline" | "pls" => Ok(FitBase::PlsBaseline),
            v => Err(Error::config(
                "ensemble.base",
                format!("unknown base `{v}`"),
            )),
        }
    }

    pub fn resample_kind(&self) -> Result<ResampleKind> {
        self.get("ensemble.kind").parse()
    }

    fn holdout(&self) -> Result<f64> {
        let h: f64 = self.parse("ensemble.holdout")?;
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::config(
                "ensemble.holdout",
                "must lie strictly between 0 and 1",
            ));
        }
        Ok(h)
    }

    pub fn alpha(&self) -> Result<f64> {
        let a: f64 = self.parse("predict.alpha")?;
        if !(a > 0.0) {
            return Err(Error::config("predict.alpha", "must be positive"));
        }
        Ok(a)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let s = Schedule {
            start: self.at_least("curve.start", 1)?,
            step: self.at_least("curve.step", 1)?,
            stop: self.parse("curve.stop")?,
        };
        if s.stop < s.start {
            return Err(Error::config("curve.stop", "must not be below curve.start"));
        }
        Ok(s)
    }

    pub fn only_sizes(&self) -> Result<Option<Vec<usize>>> {
        match self.get("curve.sizes") {
            "all" => Ok(None),
            v => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::config("curve.sizes", format!("cannot parse `{s}`")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    pub fn methods(&self) -> Result<Vec<MethodSpec>> {
        let n = self.at_least("curve.n_models", 1)?;
        let holdout = self.holdout()?;
        let k = self.at_least("features.k", 1)?;
        let methods = match self.get("curve.methods") {
            "default" => default_methods(n),
            list => list
                .split(',')
                .map(|name| {
                    method_by_name(name.trim(), n).ok_or_else(|| {
                        Error::config(
                            "curve.methods",
                            format!(
                                "unknown method `{}` (known: {})",
                                name.trim(),
                                METHOD_NAMES.join(", ")
                            ),
                        )
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(methods
            .into_iter()
            .map(|m| {
                if m.k == 0 {
                    m
                } else {
                    MethodSpec { holdout, k, ..m }
                }
            })
            .collect())
    }

    pub fn experiment_settings(&self) -> Result<ExperimentSettings> {
        Ok(ExperimentSettings {
            preprocess: self.preprocess_config()?,
            n_hidden: self.at_least("mlp.hidden", 1)?,
            train: self.train_config()?,
            include_temperature: self.flag("features.temperature")?,
            refit_per_member: self.flag("features.refit_per_member")?,
            pls_max_factors: self.at_least("pls.max_factors", 1)?,
            pls_folds: self.at_least("pls.folds", 2)?,
        })
    }

    fn components(&self, key: &str, data: &SampleSet) -> Result<Vec<String>> {
        match self.get(key) {
            "all" => Ok(data.component_names().to_vec()),
            list => list
                .split(',')
                .map(|c| {
                    let c = c.trim();
                    data.component_index(c)
                        .map(|_| c.to_string())
                        .map_err(|_| Error::config(key, format!("dataset has no component `{c}`")))
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitBase {
    Mlp,
    Linear,
    PlsBaseline,
}

/// Serialized calibration: the fitted preprocessing chain and one model per
/// component. Stored as JSON with shortest round-trip number formatting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub preprocessor: Preprocessor,
    pub components: Vec<ComponentModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComponentModel {
    Ensemble(Ensemble),
    Pls {
        component: String,
        model: PlsRegModel,
    },
}

impl ComponentModel {
    pub fn component(&self) -> &str {
        match self {
            ComponentModel::Ensemble(e) => &e.component_name,
            ComponentModel::Pls { component, .. } => component,
        }
    }

    pub fn n_members(&self) -> usize {
        match self {
            ComponentModel::Ensemble(e) => e.n_members(),
            ComponentModel::Pls { .. } => 1,
        }
    }
}

impl ModelFile {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::ModelFormat(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<ModelFile> {
        #[derive(Deserialize)]
        struct Head {
            format: String,
            version: u32,
        }
        let head: Head =
            serde_json::from_str(text).map_err(|e| Error::ModelFormat(e.to_string()))?;
        if head.format != MODEL_FORMAT {
            return Err(Error::ModelFormat(format!(
                "not a model file (format `{}`)",
                head.format
            )));
        }
        if head.version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported version {} (expected {MODEL_VERSION})",
                head.version
            )));
        }
        serde_json::from_str(text).map_err(|e| Error::ModelFormat(e.to_string()))
    }
}

/// Fits the configured model for every selected component.
pub fn fit_model(data: &SampleSet, settings: &Settings) -> Result<ModelFile> {
    let components = settings.components("fit.components", data)?;
    let seed = settings.seed()?;
    let (pre, train) = Preprocessor::fit(&settings.preprocess_config()?, data)?;
    let n = train.n_samples();
    let base = settings.base()?;
    let mut out = Vec::with_capacity(components.len());
    for comp in &components {
        let model = match base {
            FitBase::PlsBaseline => {
                let c = train.component_index(comp)?;
                let max: usize = settings.at_least("pls.max_factors", 1)?;
                let folds: usize = settings.at_least("pls.folds", 2)?;
                let m = fit_pls_cv(
                    train.absorbance(),
                    &train.target(c),
                    max.min(n.saturating_sub(2)).max(1),
                    folds.min(n),
                    seed,
                )?;
                ComponentModel::Pls {
                    component: comp.clone(),
                    model: m,
                }
            }
            FitBase::Mlp | FitBase::Linear => {
                let kind = settings.resample_kind()?;
                let n_models = settings.at_least("ensemble.n_models", 1)?;
                let plan = make_plan(kind, n, n_models, settings.holdout()?, seed)?;
                ComponentModel::Ensemble(fit_ensemble(
                    &train,
                    comp,
                    &plan,
                    &settings.ensemble_config()?,
                )?)
            }
        };
        out.push(model);
    }
    Ok(ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        preprocessor: pre,
        components: out,
    })
}

/// Intervals per component (outer) and sample (inner).
pub fn predict_model(
    model: &ModelFile,
    data: &SampleSet,
    alpha: f64,
) -> Result<Vec<Vec<PredictionInterval>>> {
    let x = model.preprocessor.apply(data)?;
    model
        .components
        .iter()
        .map(|c| match c {
            ComponentModel::Ensemble(e) => {
                e.predict_intervals(x.absorbance(), x.temperatures(), alpha)
            }
            ComponentModel::Pls { model, .. } => model
                .predict(x.absorbance())?
                .into_iter()
                .map(|m| confidence_interval(m, 0.0, alpha))
                .collect(),
        })
        .collect()
}

/// Prediction table: `sample` then `<component>_{mean,sigma,lower,upper}`
/// per component. Numbers use the shortest representation that parses back
/// to the same value.
pub fn format_predictions(components: &[String], intervals: &[Vec<PredictionInterval>]) -> String {
    let mut out = String::from("sample");
    for c in components {
        for f in ["mean", "sigma", "lower", "upper"] {
            out.push_str(&format!(",{c}_{f}"));
        }
    }
    out.push('\n');
    let n = intervals.first().map_or(0, Vec::len);
    for i in 0..n {
        out.push_str(&i.to_string());
        for col in intervals {
            let p = &col[i];
            out.push_str(&format!(",{},{},{},{}", p.mean, p.sigma, p.lower, p.upper));
        }
        out.push('\n');
    }
    out
}

/// Parses a prediction table back into per-component intervals. The
/// multiplier is recovered as `(upper - mean) / sigma`, or 0 when sigma is 0.
pub fn parse_predictions(text: &str) -> Result<(Vec<String>, Vec<Vec<PredictionInterval>>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Header("empty prediction file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"sample") || (cols.len() - 1) % 4 != 0 || cols.len() < 5 {
        return Err(Error::Header(format!(
            "unexpected prediction header `{header}`"
        )));
    }
    let mut names = Vec::new();
    for chunk in cols[1..].chunks(4) {
        let name = chunk[0].strip_suffix("_mean").ok_or_else(|| {
            Error::Header(format!("expected `<component>_mean`, got `{}`", chunk[0]))
        })?;
        for (c, f) in chunk.iter().zip(["mean", "sigma", "lower", "upper"]) {
            if *c != format!("{name}_{f}") {
                return Err(Error::Header(format!("expected `{name}_{f}`, got `{c}`")));
            }
        }
        names.push(name.to_string());
    }
    let mut out: Vec<Vec<PredictionInterval>> = vec![Vec::new(); names.len()];
    for (r, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                row: r + 2,
                column: fields.len(),
                message: format!("expected {} fields", cols.len()),
            });
        }
        let num = |j: usize| -> Result<f64> {
            fields[j].trim().parse().map_err(|_| Error::Parse {
                row: r + 2,
                column: j + 1,
                message: format!("cannot parse `{}`", fields[j]),
            })
        };
        for (c, col) in out.iter_mut().enumerate() {
            let j = 1 + 4 * c;
            let (mean, sigma, lower, upper) = (num(j)?, num(j + 1)?, num(j + 2)?, num(j + 3)?);
            let alpha = if sigma > 0.0 {
                (upper - mean) / sigma
            } else {
                0.0
            };
            col.push(PredictionInterval {
                mean,
                sigma,
                alpha,
                lower,
                upper,
            });
        }
    }
    Ok((names, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    pub component: String,
    pub n: usize,
    pub rmse: f64,
    pub coverage: f64,
}

/// RMSE of the mean column and interval coverage for every component of a
/// prediction table against the measured values in `data`.
pub fn evaluate_predictions(text: &str, data: &SampleSet) -> Result<Vec<ComponentScore>> {
    let (names, cols) = parse_predictions(text)?;
    names
        .iter()
        .zip(&cols)
        .map(|(name, col)| {
            let actual = data.target(data.component_index(name)?);
            if actual.len() != col.len() {
                return Err(Error::DimensionMismatch {
                    what: "prediction rows vs dataset samples",
                    expected: actual.len(),
                    actual: col.len(),
                });
            }
            let mean: Vec<f64> = col.iter().map(|p| p.mean).collect();
            Ok(ComponentScore {
                component: name.clone(),
                n: actual.len(),
                rmse: rmse(&actual, &mean)?,
                coverage: coverage(col, &actual)?,
            })
        })
        .collect()
}

/// Runs the configured learning curve `repeat` times with seeds
/// `seed, seed + 1, ...`.
pub fn learning_curves(data: &SampleSet, settings: &Settings) -> Result<Vec<LearningCurve>> {
    let methods = settings.methods()?;
    let schedule = settings.schedule()?;
    let components = settings.components("curve.components", data)?;
    let exp = settings.experiment_settings()?;
    let only = settings.only_sizes()?;
    let repeat = settings.at_least("curve.repeat", 1)?;
    let seed = settings.seed()?;
    (0..repeat as u64)
        .map(|r| {
            run_learning_curve(
                data,
                &methods,
                &schedule,
                &components,
                seed + r,
                &exp,
                only.as_deref(),
            )
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config: &'a BTreeMap<String, String>,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    started_unix: u64,
    finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn digest(path: &Path) -> Result<InputDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let hash = Sha256::digest(&bytes);
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Parser, Debug)]
#[command(
    name = "nircal",
    version,
    about = "NIR calibration with neural-network ensembles"
)]
struct Cli {
    /// Settings file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a calibration model.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict with intervals `mean ± alpha * sigma`.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the learning-curve experiment and export RMSE tables.
    LearningCurve {
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        repeat: Option<usize>,
    },
    /// RMSE and coverage of a prediction file.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Splits dotted `--key value` / `--key=value` settings out of the argument
/// list; everything else goes to the parser.
fn split_overrides(
    args: Vec<OsString>,
) -> std::result::Result<(Vec<OsString>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let dotted = a
            .to_str()
            .and_then(|s| s.strip_prefix("--"))
            .filter(|s| s.split('=').next().unwrap().contains('.'));
        match dotted {
            Some(s) => {
                let s = s.to_string();
                if let Some((k, v)) = s.split_once('=') {
                    overrides.push((k.to_string(), v.to_string()));
                } else {
                    let v = it
                        .next()
                        .and_then(|v| v.into_string().ok())
                        .ok_or_else(|| format!("missing value for --{s}"))?;
                    overrides.push((s, v));
                }
            }
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

/// Entry point; returns the process exit code.
pub fn main_with_args<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let (rest, overrides) = match split_overrides(args.into_iter().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let mut settings = Settings::default();
    if let Some(p) = &cli.config {
        settings.apply_text(&read_text(p)?)?;
    }
    for (k, v) in overrides {
        settings.set(k, v)?;
    }
    if let Some(s) = cli.seed {
        settings.set("seed", &s.to_string())?;
    }
    if let Command::LearningCurve {
        repeat: Some(r), ..
    } = &cli.command
    {
        settings.set("curve.repeat", &r.to_string())?;
    }
    if let Command::Predict { alpha: Some(a), .. } = &cli.command {
        settings.set("predict.alpha", &a.to_string())?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::config("--threads", e.to_string()))?;
    let mut inputs: Vec<&Path> = cli.config.iter().map(PathBuf::as_path).collect();
    pool.install(|| execute(&cli.command, &settings, &mut inputs))
}

fn execute<'a>(
    command: &'a Command,
    settings: &Settings,
    inputs: &mut Vec<&'a Path>,
) -> Result<()> {
    let started = unix_now();
    let (name, outputs, manifest_path): (&str, Vec<PathBuf>, PathBuf) = match command {
        Command::Synth { out } => {
            let set = generate(&settings.gen_config()?)?;
            save_sampleset(&set, out)?;
            ("synth", vec![out.clone()], sidecar(out))
        }
        Command::Fit { data, out } => {
            inputs.push(data);
            let set = load_sampleset(data)?;
            let model = fit_model(&set, settings)?;
            write_atomic(out, model.to_json()?.as_bytes())?;
            ("fit", vec![out.clone()], sidecar(out))
        }
        Command::Predict {
            model, data, out, ..
        } => {
            inputs.push(model);
            inputs.push(data);
            let m = ModelFile::from_json(&read_text(model)?)?;
            let set = load_sampleset(data)?;
            let intervals = predict_model(&m, &set, settings.alpha()?)?;
            let names: Vec<String> = m
                .components
                .iter()
                .map(|c| c.component().to_string())
                .collect();
            write_atomic(out, format_predictions(&names, &intervals).as_bytes())?;
            ("predict", vec![out.clone()], sidecar(out))
        }
        Command::LearningCurve { data, out, .. } => {
            inputs.push(data);
            let set = load_sampleset(data)?;
            let curves = learning_curves(&set, settings)?;
            let mut written = Vec::new();
            if curves.len() == 1 {
                written.extend(export_curve(&curves[0], out, "rmse")?);
            } else {
                for c in &curves {
                    written.extend(export_curve(c, out, &format!("rmse_seed{}", c.seed))?);
                }
                written.extend(export_curve(&mean_curve(&curves)?, out, "rmse_mean")?);
            }
            ("learning-curve", written, out.join("meta.json"))
        }
        Command::Evaluate {
            predictions,
            data,
            out,
        } => {
            let set = load_sampleset(data)?;
            let scores = evaluate_predictions(&read_text(predictions)?, &set)?;
            for s in &scores {
                println!(
                    "{} n={} rmse={} coverage={}",
                    s.component, s.n, s.rmse, s.coverage
                );
            }
            match out {
                Some(out) => {
                    inputs.push(predictions);
                    inputs.push(data);
                    let json = serde_json::to_string_pretty(&scores)
                        .map_err(|e| Error::ModelFormat(e.to_string()))?;
                    write_atomic(out, json.as_bytes())?;
                    ("evaluate", vec![out.clone()], sidecar(out))
                }
                None => return Ok(()),
            }
        }
    };
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: name,
        seed: settings.seed()?,
        config: settings.values(),
        inputs: inputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        started_unix: started,
        finished_unix: unix_now(),
    };
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::ModelFormat(e.to_string()))?;
    write_atomic(&manifest_path, json.as_bytes())
}
