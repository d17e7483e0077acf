//! Spectral preprocessing: polynomial baseline removal, mean centering,
//! multiplicative scatter correction and Savitzky–Golay filtering.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectra::Spectrum;

/// Vandermonde matrix in the grid variable mapped onto [-1, 1].
fn vandermonde(grid: &[f64], order: usize) -> DMatrix<f64> {
    let lo = grid[0];
    let hi = grid[grid.len() - 1];
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    DMatrix::from_fn(grid.len(), order + 1, |i, j| {
        ((grid[i] - mid) / half).powi(j as i32)
    })
}

fn check_baseline_args(n_points: usize, order: usize) -> Result<()> {
    if order > 2 {
        return Err(Error::invalid(format!(
            "baseline order {order} not in {{0, 1, 2}}"
        )));
    }
    if n_points < order + 2 {
        return Err(Error::invalid(format!(
            "baseline order {order} needs at least {} grid points, got {n_points}",
            order + 2
        )));
    }
    Ok(())
}

/// Least-squares polynomial coefficients of `y` against the grid mapped
/// linearly onto [-1, 1] (constant term first).
pub fn fit_polynomial(grid: &[f64], y: &[f64], order: usize) -> Result<Vec<f64>> {
    if grid.len() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "polynomial fit length",
            expected: grid.len(),
            actual: y.len(),
        });
    }
    if grid.len() < order + 1 {
        return Err(Error::invalid("too few points for polynomial fit"));
    }
    let a = vandermonde(grid, order);
    let qr = a.qr();
    let qty = qr.q().transpose() * DVector::from_column_slice(y);
    let coeffs = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numerical("singular Vandermonde system".into()))?;
    Ok(coeffs.iter().copied().collect())
}

/// Subtracts the least-squares polynomial of degree `order` (0, 1 or 2).
pub fn baseline_correct(spectrum: &Spectrum, order: usize) -> Result<Spectrum> {
    let x = DMatrix::from_row_slice(1, spectrum.len(), spectrum.absorbance());
    let out = baseline_correct_rows(spectrum.wavenumbers(), &x, order)?;
    Spectrum::new(
        spectrum.wavenumbers().to_vec(),
        out.iter().copied().collect(),
    )
}

/// Row-wise [`baseline_correct`] for a matrix of spectra on `grid`.
pub fn baseline_correct_rows(grid: &[f64], x: &DMatrix<f64>, order: usize) -> Result<DMatrix<f64>> {
    check_baseline_args(grid.len(), order)?;
    if x.ncols() != grid.len() {
        return Err(Error::DimensionMismatch {
            what: "spectrum length",
            expected: grid.len(),
            actual: x.ncols(),
        });
    }
    let q = vandermonde(grid, order).qr().q();
    let proj = (x * &q) * q.transpose();
    Ok(x - proj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteringModel {
    pub mean_spectrum: Vec<f64>,
}

pub fn fit_centering(x: &DMatrix<f64>) -> Result<CenteringModel> {
    if x.nrows() == 0 {
        return Err(Error::invalid("centering needs at least one sample"));
    }
    Ok(CenteringModel {
        mean_spectrum: x.row_mean().iter().copied().collect(),
    })
}

impl CenteringModel {
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean_spectrum.len() {
            return Err(Error::DimensionMismatch {
                what: "grid length for centering",
                expected: self.mean_spectrum.len(),
                actual: x.ncols(),
            });
        }
        let mut out = x.clone();
        for mut row in out.row_iter_mut() {
            for (v, m) in row.iter_mut().zip(&self.mean_spectrum) {
                *v -= m;
            }
        }
        Ok(out)
    }
}

pub fn apply_centering(model: &CenteringModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    model.apply(x)
}

const MSC_MIN_SLOPE: f64 = 1e-8;

/// Multiplicative scatter correction against `reference`, or against the
/// column mean of `x` when no reference is given.
pub fn msc(x: &DMatrix<f64>, reference: Option<&[f64]>) -> Result<DMatrix<f64>> {
    let p = x.ncols();
    if p < 2 {
        return Err(Error::invalid("MSC needs at least 2 grid points"));
    }
    let reference: Vec<f64> = match reference {
        Some(r) if r.len() != p => {
            return Err(Error::DimensionMismatch {
                what: "MSC reference length",
                expected: p,
                actual: r.len(),
            })
        }
        Some(r) => r.to_vec(),
        None => {
            if x.nrows() == 0 {
                return Err(Error::invalid("MSC needs at least one sample"));
            }
            x.row_mean().iter().copied().collect()
        }
    };
    let rm = reference.iter().sum::<f64>() / p as f64;
    let dev: Vec<f64> = reference.iter().map(|v| v - rm).collect();
    let var: f64 = dev.iter().map(|d| d * d).sum();
    if var <= f64::EPSILON * f64::EPSILON * p as f64 {
        return Err(Error::invalid("MSC reference spectrum has zero variance"));
    }
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.iter().sum::<f64>() / p as f64;
        let cov: f64 = row.iter().zip(&dev).map(|(v, d)| (v - mean) * d).sum();
        let mut b = cov / var;
        if b.abs() < MSC_MIN_SLOPE {
            b = if b < 0.0 {
                -MSC_MIN_SLOPE
            } else {
                MSC_MIN_SLOPE
            };
        }
        let a = mean - b * rm;
        for v in row.iter_mut() {
            *v = (*v - a) / b;
        }
    }
    Ok(out)
}

/// Savitzky–Golay convolution filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgFilter {
    pub window: usize,
    pub poly_order: usize,
    pub deriv_order: usize,
    /// Interior convolution weights, one per window position.
    pub coefficients: Vec<f64>,
    /// Weights for evaluating the window polynomial at every offset
    /// `-half..=half`; the middle row equals `coefficients`.
    edge_weights: Vec<Vec<f64>>,
}

fn falling_factorial(j: usize, d: usize) -> f64 {
    ((j - d + 1)..=j).map(|v| v as f64).product()
}

pub fn build_sg(window: usize, poly_order: usize, deriv_order: usize) -> Result<SgFilter> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::invalid(format!(
            "SG window {window} must be odd and >= 3"
        )));
    }
    if poly_order >= window {
        return Err(Error::invalid(format!(
            "SG polynomial order {poly_order} must be below the window {window}"
        )));
    }
    if deriv_order > poly_order {
        return Err(Error::invalid(format!(
            "SG derivative order {deriv_order} exceeds polynomial order {poly_order}"
        )));
    }
    let half = (window / 2) as f64;
    // offsets scaled to [-1, 1] keep the normal matrix well conditioned
    let a = DMatrix::from_fn(window, poly_order + 1, |i, j| {
        ((i as f64 - half) / half).powi(j as i32)
    });
    let pinv = a
        .pseudo_inverse(1e-14)
        .map_err(|e| Error::Numerical(format!("SG design: {e}")))?;
    let scale = half.powi(deriv_order as i32);
    let edge_weights: Vec<Vec<f64>> = (0..window)
        .map(|pos| {
            let u = (pos as f64 - half) / half;
            (0..window)
                .map(|k| {
                    (deriv_order..=poly_order)
                        .map(|j| {
                            falling_factorial(j, deriv_order)
                                * u.powi((j - deriv_order) as i32)
                                * pinv[(j, k)]
                        })
                        .sum::<f64>()
                        / scale
                })
                .collect()
        })
        .collect();
    Ok(SgFilter {
        window,
        poly_order,
        deriv_order,
        coefficients: edge_weights[window / 2].clone(),
        edge_weights,
    })
}

impl SgFilter {
    fn filter_row(&self, y: &[f64], out: &mut [f64]) {
        let n = y.len();
        let h = self.window / 2;
        let dot = |w: &[f64], s: &[f64]| w.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..n {
            out[i] = if i < h {
                dot(&self.edge_weights[i], &y[..self.window])
            } else if i + h >= n {
                let start = n - self.window;
                dot(&self.edge_weights[i - start], &y[start..])
            } else {
                dot(&self.coefficients, &y[i - h..=i + h])
            };
        }
    }

    fn spacing(&self, grid: &[f64]) -> Result<f64> {
        if grid.len() < self.window {
            return Err(Error::invalid(format!(
                "SG window {} exceeds grid length {}",
                self.window,
                grid.len()
            )));
        }
        let step = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
        if self.deriv_order > 0 {
            let uneven = grid
                .windows(2)
                .any(|w| ((w[1] - w[0]) - step).abs() > 1e-6 * step);
            if uneven {
                return Err(Error::invalid("SG derivatives need a uniform grid"));
            }
        }
        Ok(step)
    }

    pub fn apply(&self, spectrum: &Spectrum) -> Result<Spectrum> {
        let x = DMatrix::from_row_slice(1, spectrum.len(), spectrum.absorbance());
        let out = self.apply_rows(spectrum.wavenumbers(), &x)?;
        Spectrum::new(
            spectrum.wavenumbers().to_vec(),
            out.iter().copied().collect(),
        )
    }

    /// Filters every row; derivatives are taken with respect to wavenumber.
    pub fn apply_rows(&self, grid: &[f64], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != grid.len() {
            return Err(Error::DimensionMismatch {
                what: "spectrum length",
                expected: grid.len(),
                actual: x.ncols(),
            });
        }
        let step = self.spacing(grid)?;
        let unit = step.powi(self.deriv_order as i32);
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        let mut row = vec![0.0; x.ncols()];
        let mut res = vec![0.0; x.ncols()];
        for i in 0..x.nrows() {
            row.iter_mut()
                .zip(x.row(i).iter())
                .for_each(|(r, v)| *r = *v);
            self.filter_row(&row, &mut res);
            for (j, v) in res.iter().enumerate() {
                out[(i, j)] = v / unit;
            }
        }
        Ok(out)
    }
}

pub fn apply_sg(filter: &SgFilter, spectrum: &Spectrum) -> Result<Spectrum> {
    filter.apply(spectrum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| 7600.0 + 8.0 * i as f64).collect()
    }

    #[test]
    fn straight_line_is_annihilated() {
        let g = grid(50);
        let s = Spectrum::new(g.clone(), g.iter().map(|v| 0.3 - 2e-4 * v).collect()).unwrap();
        let out = baseline_correct(&s, 1).unwrap();
        assert!(out.absorbance().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn offset_invariance_order0() {
        let g = grid(40);
        let mut r = rng::from_seed(3);
        let base: Vec<f64> = (0..40).map(|_| r.random::<f64>()).collect();
        let shifted: Vec<f64> = base.iter().map(|v| v + 0.5).collect();
        let a = baseline_correct(&Spectrum::new(g.clone(), base).unwrap(), 0).unwrap();
        let b = baseline_correct(&Spectrum::new(g, shifted).unwrap(), 0).unwrap();
        for (x, y) in a.absorbance().iter().zip(b.absorbance()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_peak_recovered_from_sloped_baseline() {
        // a peak whose own linear component is zero: symmetric about the grid
        // midpoint and with its mean removed analytically below
        let g = grid(426);
        let mid = 0.5 * (g[0] + g[425]);
        let peak: Vec<f64> = g
            .iter()
            .map(|v| (-((v - mid) / 120.0).powi(2)).exp())
            .collect();
        // the order-1 least-squares part of a symmetric peak is its mean
        let mean = peak.iter().sum::<f64>() / peak.len() as f64;
        let pure: Vec<f64> = peak.iter().map(|p| p - mean).collect();
        let input: Vec<f64> = peak.iter().zip(&g).map(|(p, v)| p + 0.001 * v).collect();
        let out = baseline_correct(&Spectrum::new(g, input).unwrap(), 1).unwrap();
        for (a, b) in out.absorbance().iter().zip(&pure) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn refit_of_corrected_output_is_zero() {
        let g = grid(60);
        let mut r = rng::from_seed(9);
        let y: Vec<f64> = (0..60).map(|_| r.random::<f64>()).collect();
        for order in 0..=2 {
            let out =
                baseline_correct(&Spectrum::new(g.clone(), y.clone()).unwrap(), order).unwrap();
            let c = fit_polynomial(&g, out.absorbance(), order).unwrap();
            assert!(c.iter().all(|v| v.abs() < 1e-9), "{c:?}");
        }
    }

    #[test]
    fn baseline_rejects_bad_args() {
        let s = Spectrum::new(vec![1.0, 2.0, 3.0], vec![0.0; 3]).unwrap();
        assert!(baseline_correct(&s, 3).is_err());
        assert!(baseline_correct(&s, 2).is_err());
        assert!(baseline_correct(&s, 1).is_ok());
    }

    #[test]
    fn centering_examples() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 2.0]);
        let m = fit_centering(&x).unwrap();
        assert_eq!(m.mean_spectrum, vec![1.0]);
        assert_eq!(
            apply_centering(&m, &x).unwrap(),
            DMatrix::from_row_slice(2, 1, &[-1.0, 1.0])
        );

        let same = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let c = fit_centering(&same).unwrap().apply(&same).unwrap();
        assert!(c.iter().all(|v| *v == 0.0));

        let mut r = rng::from_seed(1);
        let x = DMatrix::from_fn(20, 50, |_, _| r.random::<f64>());
        let c = fit_centering(&x).unwrap().apply(&x).unwrap();
        for j in 0..50 {
            assert!(c.column(j).mean().abs() < 1e-12);
        }
        assert!(m.apply(&DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn msc_examples() {
        let reference = vec![0.1, 0.5, 0.2, 0.9, 0.4];
        let x = DMatrix::from_row_slice(2, 5, &[0.1, 0.5, 0.2, 0.9, 0.4, 0.5, 1.3, 0.7, 2.1, 1.1]);
        let out = msc(&x, Some(&reference)).unwrap();
        for i in 0..2 {
            for j in 0..5 {
                assert!((out[(i, j)] - reference[j]).abs() < 1e-10);
            }
        }
        assert!(msc(&x, Some(&[1.0; 5])).is_err());
        assert!(msc(&x, Some(&[1.0; 4])).is_err());
    }

    #[test]
    fn msc_affine_family_and_idempotence() {
        let mut r = rng::from_seed(17);
        let base: Vec<f64> = (0..80).map(|_| r.random::<f64>()).collect();
        let x = DMatrix::from_fn(10, 80, |i, j| {
            let b = 0.5 + i as f64 * 0.2;
            let a = -0.3 + i as f64 * 0.07;
            a + b * base[j]
        });
        let out = msc(&x, Some(&base)).unwrap();
        for i in 0..10 {
            for j in 0..80 {
                assert!((out[(i, j)] - base[j]).abs() < 1e-8);
            }
        }
        let noisy = DMatrix::from_fn(6, 80, |_, _| r.random::<f64>());
        let once = msc(&noisy, Some(&base)).unwrap();
        let twice = msc(&once, Some(&base)).unwrap();
        assert!((once - twice).abs().max() < 1e-10);
    }

    /// Direct least-squares solution for the smoothing weight vector: fit
    /// each unit impulse with a quadratic over the window by solving the
    /// 3x3 normal equations with Cramer's rule and read off the value at 0.
    fn quadratic_weights_by_normal_equations(window: usize) -> Vec<f64> {
        let h = (window / 2) as i64;
        let z: Vec<f64> = (-h..=h).map(|v| v as f64).collect();
        let s = |p: i32| z.iter().map(|v| v.powi(p)).sum::<f64>();
        let m = [[s(0), s(1), s(2)], [s(1), s(2), s(3)], [s(2), s(3), s(4)]];
        let det3 = |a: [[f64; 3]; 3]| {
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
        };
        let d = det3(m);
        (0..window)
            .map(|k| {
                let rhs = [1.0, z[k], z[k] * z[k]];
                let mut m0 = m;
                for r in 0..3 {
                    m0[r][0] = rhs[r];
                }
                det3(m0) / d
            })
            .collect()
    }

    #[test]
    fn sg_five_point_quadratic() {
        let f = build_sg(5, 2, 0).unwrap();
        let expected = [-3.0, 12.0, 17.0, 12.0, -3.0].map(|v| v / 35.0);
        let oracle = quadratic_weights_by_normal_equations(5);
        for k in 0..5 {
            assert!((f.coefficients[k] - expected[k]).abs() < 1e-12);
            assert!((oracle[k] - expected[k]).abs() < 1e-12);
        }
        assert!((f.coefficients.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let oracle7 = quadratic_weights_by_normal_equations(7);
        let f7 = build_sg(7, 2, 0).unwrap();
        for k in 0..7 {
            assert!((f7.coefficients[k] - oracle7[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn sg_reproduces_quadratics_including_edges() {
        let g = grid(30);
        let y: Vec<f64> = g
            .iter()
            .map(|v| {
                let u = (v - 7700.0) / 100.0;
                0.2 - 0.5 * u + 0.03 * u * u
            })
            .collect();
        let s = Spectrum::new(g, y.clone()).unwrap();
        for w in [5, 7, 11] {
            let out = apply_sg(&build_sg(w, 2, 0).unwrap(), &s).unwrap();
            for (a, b) in out.absorbance().iter().zip(&y) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sg_first_derivative_of_quadratic() {
        let g = grid(25);
        let y: Vec<f64> = g.iter().map(|v| 1e-6 * (v - 7650.0).powi(2)).collect();
        let out = build_sg(7, 2, 1)
            .unwrap()
            .apply(&Spectrum::new(g.clone(), y).unwrap())
            .unwrap();
        for (d, v) in out.absorbance().iter().zip(&g) {
            assert!((d - 2e-6 * (v - 7650.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn sg_smooths_white_noise() {
        let mut r = rng::from_seed(4);
        let g = grid(300);
        let y: Vec<f64> = (0..300).map(|_| r.random::<f64>() - 0.5).collect();
        let out = build_sg(11, 2, 0)
            .unwrap()
            .apply(&Spectrum::new(g, y.clone()).unwrap())
            .unwrap();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        assert!(var(out.absorbance()) < var(&y));
    }

    #[test]
    fn sg_argument_validation() {
        assert!(build_sg(4, 2, 0).is_err());
        assert!(build_sg(1, 0, 0).is_err());
        assert!(build_sg(5, 5, 0).is_err());
        assert!(build_sg(5, 2, 3).is_err());
        let s = Spectrum::new(grid(4), vec![0.0; 4]).unwrap();
        assert!(build_sg(5, 2, 0).unwrap().apply(&s).is_err());
    }
}
