//! Linear feature extraction from spectra: principal components and the
//! spectra-only PLS projection, plus assembly of model inputs with an
//! optional standardized temperature column.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    Pca,
    PlsX,
}

impl std::str::FromStr for ProjectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(ProjectionKind::Pca),
            "pls_x" | "plsx" | "pls" => Ok(ProjectionKind::PlsX),
            other => Err(Error::config(
                "features.kind",
                format!("unknown kind `{other}`"),
            )),
        }
    }
}

impl std::fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProjectionKind::Pca => "pca",
            ProjectionKind::PlsX => "pls_x",
        })
    }
}

/// A fitted linear map `x -> (x - center) * loadings`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub kind: ProjectionKind,
    pub center: DVector<f64>,
    /// n_points x k, one column per component.
    pub loadings: DMatrix<f64>,
    /// Captured variance fraction per component (empty for PLS-X).
    pub explained: Vec<f64>,
}

impl Projection {
    pub fn k(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn n_points(&self) -> usize {
        self.center.len()
    }

    pub fn scores(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.n_points() {
            return Err(Error::DimensionMismatch {
                what: "grid length for projection",
                expected: self.n_points(),
                actual: x.ncols(),
            });
        }
        Ok(center_rows(x, &self.center) * &self.loadings)
    }
}

fn center_rows(x: &DMatrix<f64>, center: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        for (v, c) in row.iter_mut().zip(center.iter()) {
            *v -= c;
        }
    }
    out
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    x.row_mean().transpose()
}

fn check_k(x: &DMatrix<f64>, k: usize) -> Result<()> {
    if x.nrows() < 2 {
        return Err(Error::invalid("projection needs at least 2 samples"));
    }
    let max_k = (x.nrows() - 1).min(x.ncols());
    if k < 1 || k > max_k {
        return Err(Error::invalid(format!(
            "component count {k} outside 1..={max_k}"
        )));
    }
    Ok(())
}

/// Flips `v` so that its largest-magnitude entry is positive (the first such
/// entry on exact ties).
fn orient(mut v: DVector<f64>) -> DVector<f64> {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
    v
}

const RANK_TOL: f64 = 1e-10;

pub fn fit_pca(x: &DMatrix<f64>, k: usize) -> Result<Projection> {
    check_k(x, k)?;
    let center = column_means(x);
    let xc = center_rows(x, &center);
    let svd = xc.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD did not return right singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let top = sv.first().copied().unwrap_or(0.0);
    let rank = sv
        .iter()
        .filter(|&&s| s > RANK_TOL * top.max(f64::MIN_POSITIVE))
        .count();
    if rank < k {
        return Err(Error::Numerical(format!(
            "data rank {rank} is below the requested {k} components"
        )));
    }
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let mut loadings = DMatrix::zeros(x.ncols(), k);
    for (c, &i) in order.iter().take(k).enumerate() {
        let v = orient(v_t.row(i).transpose());
        loadings.set_column(c, &v);
    }
    let explained = sv.iter().take(k).map(|s| s * s / total).collect();
    Ok(Projection {
        kind: ProjectionKind::Pca,
        center,
        loadings,
        explained,
    })
}

/// Matrix-vector steps between two squarings of the iteration operator.
pub const POWER_ROUND: usize = 50;
pub const POWER_MAX_SQUARINGS: usize = 60;
/// Convergence when `|G w - (w'G w) w| <= POWER_TOL * (w'G w)`.
pub const POWER_TOL: f64 = 1e-12;

/// Dominant eigenvector of the symmetric positive semi-definite `gram` by
/// power iteration from `start`. When a round of steps does not converge
/// the operator is squared, so small eigenvalue gaps cost a few extra
/// matrix products instead of thousands of steps.
fn dominant_direction(gram: &DMatrix<f64>, start: DVector<f64>) -> Result<DVector<f64>> {
    let mut op = gram.clone();
    let mut w = start.normalize();
    for _ in 0..=POWER_MAX_SQUARINGS {
        for _ in 0..POWER_ROUND {
            let next = &op * &w;
            let norm = next.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Numerical("power iteration collapsed to zero".into()));
            }
            w = next / norm;
            let gw = gram * &w;
            let rho = w.dot(&gw);
            if (gw - &w * rho).norm() <= POWER_TOL * rho {
                return Ok(w);
            }
        }
        op = &op * &op;
        let s = op.amax();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Numerical("power iteration operator vanished".into()));
        }
        op /= s;
    }
    Err(Error::Numerical("power iteration did not converge".into()))
}

/// Spectra-only PLS: NIPALS with the centered spectra acting as their own
/// response block. Each factor's weight is the dominant direction of the
/// current (deflated) cross-product matrix, its score is `t = X w`, its
/// loading `p = X't / t't`, and the block is deflated by `t p'`.
pub fn fit_pls_x(x: &DMatrix<f64>, k: usize) -> Result<Projection> {
    check_k(x, k)?;
    let center = column_means(x);
    let mut xr = center_rows(x, &center);
    let scale = xr.norm().max(f64::MIN_POSITIVE);
    let mut loadings = DMatrix::zeros(x.ncols(), k);
    for c in 0..k {
        // classical NIPALS start: the column with the largest sum of squares
        let mut best = 0;
        let mut best_ss = -1.0;
        for j in 0..xr.ncols() {
            let ss = xr.column(j).norm_squared();
            if ss > best_ss {
                best_ss = ss;
                best = j;
            }
        }
        if best_ss <= (RANK_TOL * scale).powi(2) {
            return Err(Error::Numerical(format!(
                "data rank {c} is below the requested {k} components"
            )));
        }
        let start = xr.column(best).into_owned();
        let w = if xr.nrows() < xr.ncols() {
            // iterate on X X' (the smaller Gram matrix); w = X'u spans the
            // same dominant direction of X'X
            let u = dominant_direction(&(&xr * xr.transpose()), start)?;
            (xr.tr_mul(&u)).normalize()
        } else {
            dominant_direction(&xr.tr_mul(&xr), xr.tr_mul(&start))?
        };
        let w = orient(w);
        let t = &xr * &w;
        let tt = t.norm_squared();
        if tt < 1e-12 * scale * scale {
            return Err(Error::Numerical(format!(
                "data rank {c} is below the requested {k} components"
            )));
        }
        let p = xr.tr_mul(&t) / tt;
        xr -= &t * p.transpose();
        loadings.set_column(c, &p);
    }
    Ok(Projection {
        kind: ProjectionKind::PlsX,
        center,
        loadings,
        explained: Vec::new(),
    })
}

pub fn fit_projection(kind: ProjectionKind, x: &DMatrix<f64>, k: usize) -> Result<Projection> {
    match kind {
        ProjectionKind::Pca => fit_pca(x, k),
        ProjectionKind::PlsX => fit_pls_x(x, k),
    }
}

/// Projection plus the optional temperature input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub projection: Projection,
    pub include_temperature: bool,
    pub temperature_mean: f64,
    pub temperature_std: f64,
}

impl FeatureSpec {
    pub fn fit(
        kind: ProjectionKind,
        x: &DMatrix<f64>,
        temps: &[f64],
        k: usize,
        include_temperature: bool,
    ) -> Result<Self> {
        if temps.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                what: "temperature count",
                expected: x.nrows(),
                actual: temps.len(),
            });
        }
        let projection = fit_projection(kind, x, k)?;
        let n = temps.len() as f64;
        let mean = temps.iter().sum::<f64>() / n;
        let var = temps.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let std = var.sqrt();
        Ok(FeatureSpec {
            projection,
            include_temperature,
            temperature_mean: mean,
            temperature_std: if std > 1e-12 { std } else { 1.0 },
        })
    }

    pub fn dim(&self) -> usize {
        self.projection.k() + usize::from(self.include_temperature)
    }

    pub fn project(&self, x: &DMatrix<f64>, temps: &[f64]) -> Result<DMatrix<f64>> {
        let scores = self.projection.scores(x)?;
        if !self.include_temperature {
            return Ok(scores);
        }
        if temps.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                what: "temperature count",
                expected: x.nrows(),
                actual: temps.len(),
            });
        }
        let k = scores.ncols();
        let mut out = scores.resize_horizontally(k + 1, 0.0);
        for (i, t) in temps.iter().enumerate() {
            out[(i, k)] = (t - self.temperature_mean) / self.temperature_std;
        }
        Ok(out)
    }
}

pub fn project(spec: &FeatureSpec, x: &DMatrix<f64>, temps: &[f64]) -> Result<DMatrix<f64>> {
    spec.project(x, temps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::from_seed(seed);
        DMatrix::from_fn(n, p, |_, _| r.random::<f64>() - 0.5)
    }

    #[test]
    fn rank_one_line() {
        let x = DMatrix::from_fn(6, 2, |i, j| {
            (i as f64 - 1.0) * if j == 0 { 1.0 } else { 2.0 }
        });
        let p = fit_pca(&x, 1).unwrap();
        assert!((p.explained[0] - 1.0).abs() < 1e-10);
        let s5 = 5f64.sqrt();
        assert!((p.loadings[(0, 0)] - 1.0 / s5).abs() < 1e-12);
        assert!((p.loadings[(1, 0)] - 2.0 / s5).abs() < 1e-12);
        assert!(matches!(fit_pca(&x, 2), Err(Error::Numerical(_))));
    }

    #[test]
    fn full_basis_reconstructs() {
        let x = random(12, 5, 2);
        let p = fit_pca(&x, 5).unwrap();
        let scores = p.scores(&x).unwrap();
        let mut rec = scores * p.loadings.transpose();
        for mut row in rec.row_iter_mut() {
            row += p.center.transpose();
        }
        assert!((rec - &x).abs().max() < 1e-8);
    }

    #[test]
    fn pca_properties() {
        let x = random(30, 80, 7);
        let p = fit_pca(&x, 5).unwrap();
        let gram = p.loadings.tr_mul(&p.loadings);
        assert!((gram - DMatrix::identity(5, 5)).abs().max() < 1e-8);
        assert!(p.explained.windows(2).all(|w| w[0] >= w[1]));
        assert!(p.explained.iter().all(|e| (0.0..=1.0).contains(e)));
        assert!(p.explained.iter().sum::<f64>() <= 1.0 + 1e-12);
        let scores = p.scores(&x).unwrap();
        for j in 0..5 {
            assert!(scores.column(j).mean().abs() < 1e-10);
        }
        // row permutation leaves the loadings unchanged
        let perm: Vec<usize> = (0..30).rev().collect();
        let q = fit_pca(&x.select_rows(&perm), 5).unwrap();
        assert!((q.loadings - &p.loadings).abs().max() < 1e-8);
    }

    #[test]
    fn pca_bounds() {
        let x = random(5, 3, 1);
        assert!(fit_pca(&x, 0).is_err());
        assert!(fit_pca(&x, 4).is_err());
        assert!(fit_pca(&random(1, 3, 1), 1).is_err());
    }

    #[test]
    fn pls_x_rank_one_deflates_exactly() {
        let u: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let v: Vec<f64> = (0..5).map(|j| 1.0 + j as f64).collect();
        let x = DMatrix::from_fn(8, 5, |i, j| u[i] * v[j]);
        let p = fit_pls_x(&x, 1).unwrap();
        let scores = p.scores(&x).unwrap();
        let xc = center_rows(&x, &p.center);
        let resid = xc - &scores * p.loadings.transpose();
        assert!(resid.norm() < 1e-8);
        assert!(fit_pls_x(&x, 2).is_err());
    }

    #[test]
    fn pls_x_matches_pca_scores() {
        for seed in 0..3 {
            let x = random(30, 80, 100 + seed);
            let a = fit_pca(&x, 5).unwrap().scores(&x).unwrap();
            let b = fit_pls_x(&x, 5).unwrap().scores(&x).unwrap();
            for j in 0..5 {
                let sign = a.column(j).dot(&b.column(j)).signum();
                let d = (a.column(j) - b.column(j) * sign).amax();
                assert!(d < 1e-6, "component {j}: {d}");
            }
        }
    }

    #[test]
    fn pls_x_with_tied_eigenvalues_is_deterministic() {
        // two orthogonal directions with identical variance
        let mut x = DMatrix::zeros(4, 3);
        x[(0, 0)] = 1.0;
        x[(1, 0)] = -1.0;
        x[(2, 1)] = 1.0;
        x[(3, 1)] = -1.0;
        let a = fit_pls_x(&x, 2).unwrap();
        let b = fit_pls_x(&x, 2).unwrap();
        assert_eq!(a, b);
        let g = a.loadings.tr_mul(&a.loadings);
        assert!((g - DMatrix::identity(2, 2)).abs().max() < 1e-8);
    }

    #[test]
    fn feature_spec_projection() {
        let x = random(20, 30, 5);
        let temps: Vec<f64> = (0..20).map(|i| 20.0 + i as f64).collect();
        let spec = FeatureSpec::fit(ProjectionKind::Pca, &x, &temps, 5, true).unwrap();
        assert_eq!(spec.dim(), 6);
        let f = spec.project(&x, &temps).unwrap();
        assert_eq!(f.ncols(), 6);
        let center = DMatrix::from_row_slice(1, 30, spec.projection.center.as_slice());
        let f0 = spec.project(&center, &[spec.temperature_mean]).unwrap();
        assert!(f0.abs().max() < 1e-12);
        assert!(spec.project(&x, &temps[..3]).is_err());
        assert!(spec.project(&random(2, 29, 1), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn projection_is_affine() {
        let x = random(15, 10, 8);
        let spec = FeatureSpec::fit(ProjectionKind::PlsX, &x, &[0.0; 15], 3, false).unwrap();
        let x1 = random(4, 10, 9);
        let x2 = random(4, 10, 10);
        let a = 0.3;
        let mixed = &x1 * a + &x2 * (1.0 - a);
        let lhs = spec.project(&mixed, &[]).unwrap();
        let rhs = spec.project(&x1, &[]).unwrap() * a + spec.project(&x2, &[]).unwrap() * (1.0 - a);
        assert!((lhs - rhs).abs().max() < 1e-12);
    }
}
