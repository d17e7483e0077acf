//! Dataset container, wavenumber-range selection, train/test index
//! bookkeeping and the dataset CSV format.
//!
//! The CSV layout is one header row
//! `temperature,<component_1>,...,<component_c>,wn_<v1>,...,wn_<vp>`
//! followed by one row per sample. Wavenumbers in the header carry at most
//! six significant digits; data cells are written in the shortest form that
//! parses back to the identical `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// A single absorbance spectrum on a strictly increasing wavenumber grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    wavenumbers: Vec<f64>,
    absorbance: Vec<f64>,
}

impl Spectrum {
    pub fn new(wavenumbers: Vec<f64>, absorbance: Vec<f64>) -> Result<Self> {
        validate_grid(&wavenumbers)?;
        if absorbance.len() != wavenumbers.len() {
            return Err(Error::DimensionMismatch {
                what: "absorbance length",
                expected: wavenumbers.len(),
                actual: absorbance.len(),
            });
        }
        if absorbance.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("absorbance contains non-finite values"));
        }
        Ok(Spectrum {
            wavenumbers,
            absorbance,
        })
    }

    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }

    pub fn absorbance(&self) -> &[f64] {
        &self.absorbance
    }

    pub fn len(&self) -> usize {
        self.wavenumbers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavenumbers.is_empty()
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.wavenumbers, self.absorbance)
    }
}

pub(crate) fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::invalid("wavenumber grid needs at least 2 points"));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("wavenumber grid contains non-finite values"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(
            "wavenumber grid must be strictly increasing",
        ));
    }
    Ok(())
}

/// Spectra of several samples on one shared grid, with reference
/// concentrations (percent by mass) and measurement temperatures (°C).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    wavenumbers: Vec<f64>,
    absorbance: DMatrix<f64>,
    concentrations: DMatrix<f64>,
    temperatures: Vec<f64>,
    component_names: Vec<String>,
}

impl SampleSet {
    pub fn new(
        wavenumbers: Vec<f64>,
        absorbance: DMatrix<f64>,
        concentrations: DMatrix<f64>,
        temperatures: Vec<f64>,
        component_names: Vec<String>,
    ) -> Result<Self> {
        validate_grid(&wavenumbers)?;
        let n = absorbance.nrows();
        if n == 0 {
            return Err(Error::invalid(
                "sample set must contain at least one sample",
            ));
        }
        if absorbance.ncols() != wavenumbers.len() {
            return Err(Error::DimensionMismatch {
                what: "absorbance columns",
                expected: wavenumbers.len(),
                actual: absorbance.ncols(),
            });
        }
        if component_names.is_empty() {
            return Err(Error::invalid("at least one component is required"));
        }
        if concentrations.nrows() != n {
            return Err(Error::DimensionMismatch {
                what: "concentration rows",
                expected: n,
                actual: concentrations.nrows(),
            });
        }
        if concentrations.ncols() != component_names.len() {
            return Err(Error::DimensionMismatch {
                what: "concentration columns",
                expected: component_names.len(),
                actual: concentrations.ncols(),
            });
        }
        if temperatures.len() != n {
            return Err(Error::DimensionMismatch {
                what: "temperature count",
                expected: n,
                actual: temperatures.len(),
            });
        }
        if absorbance.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("absorbance contains non-finite values"));
        }
        if temperatures.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("temperatures contain non-finite values"));
        }
        if concentrations.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(
                "concentrations must be finite and non-negative",
            ));
        }
        Ok(SampleSet {
            wavenumbers,
            absorbance,
            concentrations,
            temperatures,
            component_names,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.absorbance.nrows()
    }

    pub fn n_points(&self) -> usize {
        self.wavenumbers.len()
    }

    pub fn n_components(&self) -> usize {
        self.component_names.len()
    }

    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }

    pub fn absorbance(&self) -> &DMatrix<f64> {
        &self.absorbance
    }

    pub fn concentrations(&self) -> &DMatrix<f64> {
        &self.concentrations
    }

    pub fn temperatures(&self) -> &[f64] {
        &self.temperatures
    }

    pub fn component_names(&self) -> &[String] {
        &self.component_names
    }

    pub fn component_index(&self, name: &str) -> Result<usize> {
        self.component_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::invalid(format!("unknown component `{name}`")))
    }

    /// Concentrations of one component as a plain vector.
    pub fn target(&self, component: usize) -> Vec<f64> {
        self.concentrations
            .column(component)
            .iter()
            .copied()
            .collect()
    }

    pub fn spectrum(&self, row: usize) -> Spectrum {
        Spectrum {
            wavenumbers: self.wavenumbers.clone(),
            absorbance: self.absorbance.row(row).iter().copied().collect(),
        }
    }

    /// Rows selected by `indices`, in that order; repeated indices repeat rows.
    pub fn subset(&self, indices: &[usize]) -> SampleSet {
        SampleSet {
            wavenumbers: self.wavenumbers.clone(),
            absorbance: self.absorbance.select_rows(indices),
            concentrations: self.concentrations.select_rows(indices),
            temperatures: indices.iter().map(|&i| self.temperatures[i]).collect(),
            component_names: self.component_names.clone(),
        }
    }

    /// Same samples with the spectra replaced (e.g. after preprocessing).
    pub fn with_spectra(
        &self,
        wavenumbers: Vec<f64>,
        absorbance: DMatrix<f64>,
    ) -> Result<SampleSet> {
        SampleSet::new(
            wavenumbers,
            absorbance,
            self.concentrations.clone(),
            self.temperatures.clone(),
            self.component_names.clone(),
        )
    }
}

/// Formats `v` rounded to at most six significant digits, without trailing
/// zeros.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    let rounded = if mag > 5 {
        let unit = 10f64.powi(mag - 5);
        (v / unit).round() * unit
    } else {
        v
    };
    let mut s = format!("{rounded:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

/// Reads a dataset CSV. Row numbers in errors are 1-based file lines
/// (the header is line 1); columns are 1-based.
pub fn load_sampleset(path: impl AsRef<Path>) -> Result<SampleSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sampleset(&text)
}

pub fn parse_sampleset(text: &str) -> Result<SampleSet> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Header("file is empty".into()))?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    if fields.first() != Some(&"temperature") {
        return Err(Error::Header("first column must be `temperature`".into()));
    }
    let first_wn = fields
        .iter()
        .position(|f| f.starts_with("wn_"))
        .ok_or_else(|| Error::Header("no `wn_<value>` columns".into()))?;
    let component_names: Vec<String> = fields[1..first_wn].iter().map(|s| s.to_string()).collect();
    if component_names.is_empty() {
        return Err(Error::Header("no component columns".into()));
    }
    if component_names.iter().any(|c| c.is_empty()) {
        return Err(Error::Header("empty component name".into()));
    }
    let mut grid = Vec::with_capacity(fields.len() - first_wn);
    for (j, f) in fields[first_wn..].iter().enumerate() {
        let v = f
            .strip_prefix("wn_")
            .and_then(|s| s.parse::<f64>().ok())
            .filter(|v| v.is_finite())
            .ok_or_else(|| {
                Error::Header(format!(
                    "column {}: expected `wn_<number>`, got `{f}`",
                    first_wn + j + 1
                ))
            })?;
        grid.push(v);
    }
    validate_grid(&grid).map_err(|e| Error::Header(e.to_string()))?;

    let n_cols = fields.len();
    let n_comp = component_names.len();
    let mut temps = Vec::new();
    let mut conc = Vec::new();
    let mut absb = Vec::new();
    for (lineno, line) in lines {
        let row = lineno + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n_cols {
            return Err(Error::Parse {
                row,
                column: cells.len().min(n_cols) + 1,
                message: format!("expected {n_cols} fields, found {}", cells.len()),
            });
        }
        for (j, cell) in cells.iter().enumerate() {
            let column = j + 1;
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column,
                message: format!("`{}` is not a number", cell.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column,
                    message: "non-finite value".into(),
                });
            }
            if j == 0 {
                temps.push(v);
            } else if j <= n_comp {
                if v < 0.0 {
                    return Err(Error::Parse {
                        row,
                        column,
                        message: "negative concentration".into(),
                    });
                }
                conc.push(v);
            } else {
                absb.push(v);
            }
        }
    }
    let n = temps.len();
    if n == 0 {
        return Err(Error::invalid("dataset has no sample rows"));
    }
    let absorbance = DMatrix::from_row_slice(n, grid.len(), &absb);
    let concentrations = DMatrix::from_row_slice(n, n_comp, &conc);
    SampleSet::new(grid, absorbance, concentrations, temps, component_names)
}

pub fn format_sampleset(set: &SampleSet) -> String {
    let mut out = String::from("temperature");
    for c in &set.component_names {
        out.push(',');
        out.push_str(c);
    }
    for v in &set.wavenumbers {
        out.push_str(",wn_");
        out.push_str(&format_sig6(*v));
    }
    out.push('\n');
    for i in 0..set.n_samples() {
        out.push_str(&set.temperatures[i].to_string());
        for c in 0..set.n_components() {
            out.push(',');
            out.push_str(&set.concentrations[(i, c)].to_string());
        }
        for j in 0..set.n_points() {
            out.push(',');
            out.push_str(&set.absorbance[(i, j)].to_string());
        }
        out.push('\n');
    }
    out
}

pub fn save_sampleset(set: &SampleSet, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), format_sampleset(set).as_bytes())
}

/// Writes through a temporary file in the destination directory and renames
/// it into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(std::fs::Permissions::from_mode(0o644))
            .map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Keeps the grid points `p` with `lo <= p <= hi`.
pub fn select_range(set: &SampleSet, lo: f64, hi: f64) -> Result<SampleSet> {
    if !(lo < hi) {
        return Err(Error::invalid(format!(
            "range lower bound {lo} must be below upper bound {hi}"
        )));
    }
    let keep: Vec<usize> = set
        .wavenumbers
        .iter()
        .enumerate()
        .filter(|(_, &p)| lo <= p && p <= hi)
        .map(|(j, _)| j)
        .collect();
    if keep.is_empty() {
        return Err(Error::invalid(format!(
            "no grid points inside [{lo}, {hi}]"
        )));
    }
    if keep.len() < 2 {
        return Err(Error::invalid(format!(
            "only one grid point inside [{lo}, {hi}]"
        )));
    }
    let grid = keep.iter().map(|&j| set.wavenumbers[j]).collect();
    set.with_spectra(grid, set.absorbance.select_columns(&keep))
}

/// Draws `n_train` distinct indices out of `0..n` for training; the rest are
/// test indices. Both lists are sorted ascending.
pub fn split_indices(n: usize, n_train: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_train < 1 || n_train >= n {
        return Err(Error::invalid(format!(
            "training size {n_train} must satisfy 1 <= n_train < {n}"
        )));
    }
    let mut rng = rng::stream(seed, Domain::Split, 0, 0);
    let mut train = index::sample(&mut rng, n, n_train).into_vec();
    train.sort_unstable();
    let test = complement(n, &train);
    Ok((train, test))
}

/// Moves `k` randomly chosen test indices into the training set.
pub fn grow_train(
    train: &[usize],
    test: &[usize],
    k: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if k > test.len() {
        return Err(Error::invalid(format!(
            "cannot move {k} samples out of a test set of {}",
            test.len()
        )));
    }
    // distinct streams per growth step, keyed by the current training size
    let mut rng = rng::stream(seed, Domain::Grow, train.len() as u32, 0);
    let mut picked = vec![false; test.len()];
    for i in index::sample(&mut rng, test.len(), k) {
        picked[i] = true;
    }
    let mut new_train = train.to_vec();
    let mut new_test = Vec::with_capacity(test.len() - k);
    for (i, &t) in test.iter().enumerate() {
        if picked[i] {
            new_train.push(t);
        } else {
            new_test.push(t);
        }
    }
    new_train.sort_unstable();
    Ok((new_train, new_test))
}

fn complement(n: usize, sorted: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - sorted.len());
    let mut it = sorted.iter().peekable();
    for i in 0..n {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}
