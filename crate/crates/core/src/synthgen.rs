//! Synthetic two-component NIR mixtures.
//!
//! Each component contributes Gaussian bands scaled by its concentration.
//! Band centers drift and widths change linearly with temperature, which
//! makes the concentration-to-spectrum map nonlinear on a fixed grid. A
//! water background (subject to the same temperature effects), a random
//! linear baseline and white noise are added on top.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::fit_pls1;
use crate::rng::{self, Domain};
use crate::spectra::SampleSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    /// cm⁻¹
    pub center: f64,
    /// Gaussian standard deviation in cm⁻¹.
    pub width: f64,
    /// Peak absorbance per unit concentration.
    pub amplitude: f64,
}

impl Band {
    pub const fn new(center: f64, width: f64, amplitude: f64) -> Self {
        Band {
            center,
            width,
            amplitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_samples: usize,
    pub n_points: usize,
    pub wn_lo: f64,
    pub wn_hi: f64,
    pub c1_range: (f64, f64),
    pub c2_range: (f64, f64),
    pub temp_range: (f64, f64),
    pub c1_bands: Vec<Band>,
    pub c2_bands: Vec<Band>,
    pub water_bands: Vec<Band>,
    /// Band-center drift in cm⁻¹ per °C away from the mid temperature.
    pub temp_shift: f64,
    /// Fractional band-width change per °C.
    pub temp_width: f64,
    pub noise_sd: f64,
    /// Largest baseline slope magnitude, absorbance per cm⁻¹.
    pub baseline_drift: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_samples: 493,
            n_points: 426,
            wn_lo: 7600.0,
            wn_hi: 11000.0,
            c1_range: (0.0, 3.0),
            c2_range: (0.0, 7.0),
            temp_range: (20.0, 40.0),
            c1_bands: vec![
                Band::new(8250.0, 70.0, 0.090),
                Band::new(8900.0, 90.0, 0.0675),
                Band::new(10150.0, 80.0, 0.0525),
            ],
            c2_bands: vec![
                Band::new(8450.0, 80.0, 0.030),
                Band::new(9500.0, 110.0, 0.025),
                Band::new(10350.0, 70.0, 0.020),
            ],
            water_bands: vec![
                Band::new(8500.0, 250.0, 0.90),
                Band::new(10300.0, 300.0, 1.44),
            ],
            temp_shift: 10.0,
            temp_width: 0.01,
            noise_sd: 0.05,
            baseline_drift: 1e-5,
            seed: 0,
        }
    }
}

impl GenConfig {
    /// The default bands with every temperature effect, drift and noise
    /// switched off, so spectra are exactly linear in the concentrations.
    pub fn linear() -> Self {
        GenConfig {
            temp_shift: 0.0,
            temp_width: 0.0,
            noise_sd: 0.0,
            baseline_drift: 0.0,
            ..GenConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::config("synth.n_samples", "must be at least 2"));
        }
        if self.n_points < 2 {
            return Err(Error::config("synth.n_points", "must be at least 2"));
        }
        let ranges = [
            ("synth.wn_lo", (self.wn_lo, self.wn_hi)),
            ("synth.c1_lo", self.c1_range),
            ("synth.c2_lo", self.c2_range),
            ("synth.temp_lo", self.temp_range),
        ];
        for (key, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::config(
                    key,
                    format!("range [{lo}, {hi}] needs lo < hi"),
                ));
            }
        }
        let bands = self
            .c1_bands
            .iter()
            .chain(&self.c2_bands)
            .chain(&self.water_bands);
        for b in bands {
            if !(b.amplitude >= 0.0) || !(b.width > 0.0) || !b.center.is_finite() {
                return Err(Error::config(
                    "synth.bands",
                    format!("band {b:?} needs amplitude >= 0 and width > 0"),
                ));
            }
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::config("synth.noise_sd", "must be non-negative"));
        }
        if !(self.baseline_drift >= 0.0) {
            return Err(Error::config(
                "synth.baseline_drift",
                "must be non-negative",
            ));
        }
        if !self.temp_shift.is_finite() || !self.temp_width.is_finite() {
            return Err(Error::config("synth.temp_shift", "must be finite"));
        }
        // widths must stay positive across the temperature range
        let half = 0.5 * (self.temp_range.1 - self.temp_range.0);
        if 1.0 - self.temp_width.abs() * half <= 0.0 {
            return Err(Error::config(
                "synth.temp_width",
                "makes band widths non-positive",
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        let step = (self.wn_hi - self.wn_lo) / (self.n_points - 1) as f64;
        (0..self.n_points)
            .map(|i| {
                if i + 1 == self.n_points {
                    self.wn_hi
                } else {
                    self.wn_lo + step * i as f64
                }
            })
            .collect()
    }

    pub fn temp_mid(&self) -> f64 {
        0.5 * (self.temp_range.0 + self.temp_range.1)
    }
}

fn add_bands(out: &mut [f64], grid: &[f64], bands: &[Band], scale: f64, shift: f64, stretch: f64) {
    if scale == 0.0 {
        return;
    }
    for b in bands {
        let c = b.center + shift;
        let w = b.width * stretch;
        for (o, v) in out.iter_mut().zip(grid) {
            let z = (v - c) / w;
            *o += scale * b.amplitude * (-0.5 * z * z).exp();
        }
    }
}

/// Water background at temperature `t` on the configured grid.
pub fn water_background(cfg: &GenConfig, t: f64) -> Vec<f64> {
    let grid = cfg.grid();
    let dt = t - cfg.temp_mid();
    let mut out = vec![0.0; grid.len()];
    add_bands(
        &mut out,
        &grid,
        &cfg.water_bands,
        1.0,
        cfg.temp_shift * dt,
        1.0 + cfg.temp_width * dt,
    );
    out
}

/// Noise-free spectrum for concentrations `(c1, c2)`, temperature `t` and
/// baseline slope `drift`.
pub fn render_spectrum(cfg: &GenConfig, c1: f64, c2: f64, t: f64, drift: f64) -> Vec<f64> {
    let grid = cfg.grid();
    let dt = t - cfg.temp_mid();
    let shift = cfg.temp_shift * dt;
    let stretch = 1.0 + cfg.temp_width * dt;
    let mut out = vec![0.0; grid.len()];
    add_bands(&mut out, &grid, &cfg.c1_bands, c1, shift, stretch);
    add_bands(&mut out, &grid, &cfg.c2_bands, c2, shift, stretch);
    add_bands(&mut out, &grid, &cfg.water_bands, 1.0, shift, stretch);
    if drift != 0.0 {
        let mid = 0.5 * (cfg.wn_lo + cfg.wn_hi);
        for (o, v) in out.iter_mut().zip(&grid) {
            *o += drift * (v - mid);
        }
    }
    out
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws a dataset. Row `i` uses its own random stream, so the result does
/// not depend on generation order.
pub fn generate(cfg: &GenConfig) -> Result<SampleSet> {
    cfg.validate()?;
    let n = cfg.n_samples;
    let p = cfg.n_points;
    let mut absorbance = DMatrix::zeros(n, p);
    let mut conc = DMatrix::zeros(n, 2);
    let mut temps = Vec::with_capacity(n);
    let noise = Normal::new(0.0, cfg.noise_sd)
        .map_err(|e| Error::config("synth.noise_sd", e.to_string()))?;
    for i in 0..n {
        let mut r = rng::stream(cfg.seed, Domain::Synth, i as u32, 0);
        let c1 = uniform(&mut r, cfg.c1_range);
        let c2 = uniform(&mut r, cfg.c2_range);
        let t = uniform(&mut r, cfg.temp_range);
        let drift = cfg.baseline_drift * (2.0 * r.random::<f64>() - 1.0);
        let mut s = render_spectrum(cfg, c1, c2, t, drift);
        if cfg.noise_sd > 0.0 {
            for v in s.iter_mut() {
                *v += noise.sample(&mut r);
            }
        }
        for (j, v) in s.into_iter().enumerate() {
            absorbance[(i, j)] = v;
        }
        conc[(i, 0)] = c1;
        conc[(i, 1)] = c2;
        temps.push(t);
    }
    SampleSet::new(
        cfg.grid(),
        absorbance,
        conc,
        temps,
        vec!["c1".into(), "c2".into()],
    )
}

/// Training RMSE of a two-factor PLS1 fit per component, on the raw
/// absorbances.
pub fn linear_fit_rmse(set: &SampleSet) -> Result<Vec<f64>> {
    if set.n_samples() < 3 {
        return Err(Error::invalid(format!(
            "{} samples cannot support a rank-2 fit",
            set.n_samples()
        )));
    }
    let x = set.absorbance();
    (0..set.n_components())
        .map(|c| {
            let y = set.target(c);
            let pred = fit_pls1(x, &y, 2)?.predict(x)?;
            let sse: f64 = pred.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum();
            Ok((sse / y.len() as f64).sqrt())
        })
        .collect()
}

pub const LINEAR_ORACLE_TOL: f64 = 1e-6;

/// Checks that a set drawn from a noiseless linear configuration is
/// recovered exactly by two PLS factors; returns the per-component RMSEs.
pub fn oracle_linear_fit_error(set: &SampleSet) -> Result<Vec<f64>> {
    let rmse = linear_fit_rmse(set)?;
    if let Some((c, r)) = rmse
        .iter()
        .enumerate()
        .find(|(_, r)| !(**r < LINEAR_ORACLE_TOL))
    {
        return Err(Error::Numerical(format!(
            "component {c}: two-factor training RMSE {r:e} exceeds {LINEAR_ORACLE_TOL:e}"
        )));
    }
    Ok(rmse)
}
