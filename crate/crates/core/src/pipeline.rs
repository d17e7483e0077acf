//! Fitted preprocessing chain: range selection, baseline removal, optional
//! scatter correction and smoothing, then mean centering.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{
    baseline_correct_rows, build_sg, fit_centering, msc, CenteringModel, SgFilter,
};
use crate::spectra::{select_range, SampleSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgSettings {
    pub window: usize,
    pub poly: usize,
    pub deriv: usize,
}

impl Default for SgSettings {
    fn default() -> Self {
        SgSettings {
            window: 11,
            poly: 2,
            deriv: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub range_lo: f64,
    pub range_hi: f64,
    /// `None` disables baseline removal.
    pub baseline_order: Option<usize>,
    pub msc: bool,
    pub sg: Option<SgSettings>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            range_lo: 7600.0,
            range_hi: 11000.0,
            baseline_order: Some(1),
            msc: false,
            sg: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub config: PreprocessConfig,
    /// Grid after range selection.
    pub grid: Vec<f64>,
    /// MSC reference (training mean after baseline removal).
    pub msc_reference: Option<Vec<f64>>,
    pub sg: Option<SgFilter>,
    pub centering: CenteringModel,
}

const GRID_TOL: f64 = 1e-6;

impl Preprocessor {
    /// Fits every data-dependent stage on `train` and returns the
    /// preprocessed training set alongside the fitted chain.
    pub fn fit(config: &PreprocessConfig, train: &SampleSet) -> Result<(Preprocessor, SampleSet)> {
        let ranged = select_range(train, config.range_lo, config.range_hi)?;
        let grid = ranged.wavenumbers().to_vec();
        let mut x = match config.baseline_order {
            Some(order) => baseline_correct_rows(&grid, ranged.absorbance(), order)?,
            None => ranged.absorbance().clone(),
        };
        let msc_reference = if config.msc {
            let r: Vec<f64> = x.row_mean().iter().copied().collect();
            x = msc(&x, Some(&r))?;
            Some(r)
        } else {
            None
        };
        let sg = match &config.sg {
            Some(s) => {
                let f = build_sg(s.window, s.poly, s.deriv)?;
                x = f.apply_rows(&grid, &x)?;
                Some(f)
            }
            None => None,
        };
        let centering = fit_centering(&x)?;
        let x = centering.apply(&x)?;
        let out = ranged.with_spectra(grid.clone(), x)?;
        Ok((
            Preprocessor {
                config: config.clone(),
                grid,
                msc_reference,
                sg,
                centering,
            },
            out,
        ))
    }

    pub fn apply(&self, set: &SampleSet) -> Result<SampleSet> {
        let ranged = select_range(set, self.config.range_lo, self.config.range_hi)?;
        let grid = ranged.wavenumbers();
        if grid.len() != self.grid.len()
            || grid
                .iter()
                .zip(&self.grid)
                .any(|(a, b)| (a - b).abs() > GRID_TOL)
        {
            return Err(Error::DimensionMismatch {
                what: "wavenumber grid after range selection",
                expected: self.grid.len(),
                actual: grid.len(),
            });
        }
        let x = self.transform(ranged.absorbance())?;
        ranged.with_spectra(self.grid.clone(), x)
    }

    fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut x = match self.config.baseline_order {
            Some(order) => baseline_correct_rows(&self.grid, x, order)?,
            None => x.clone(),
        };
        if let Some(r) = &self.msc_reference {
            x = msc(&x, Some(r))?;
        }
        if let Some(f) = &self.sg {
            x = f.apply_rows(&self.grid, &x)?;
        }
        self.centering.apply(&x)
    }
}
