//! Panel containers, quantile grids and estimator configuration.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diagnostics::Warning;
use crate::error::{Result, UfmError};

/// An N x T matrix of observables with carried (never interpreted) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelMatrix {
    values: DMatrix<f64>,
    row_ids: Vec<String>,
    col_ids: Vec<String>,
}

impl PanelMatrix {
    pub fn new(values: DMatrix<f64>, row_ids: Vec<String>, col_ids: Vec<String>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(UfmError::InvalidPanel("panel is empty".into()));
        }
        if row_ids.len() != values.nrows() || col_ids.len() != values.ncols() {
            return Err(UfmError::DimensionMismatch {
                expected: format!("{} row and {} column labels", values.nrows(), values.ncols()),
                actual: format!("{} and {}", row_ids.len(), col_ids.len()),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (i, t) = (pos % values.nrows(), pos / values.nrows());
            return Err(UfmError::InvalidPanel(format!(
                "non-finite entry at ({}, {})",
                row_ids[i], col_ids[t]
            )));
        }
        Ok(Self {
            values,
            row_ids,
            col_ids,
        })
    }

    /// Builds a panel with labels `1..=N` and `1..=T`.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let rows = (1..=values.nrows()).map(|i| i.to_string()).collect();
        let cols = (1..=values.ncols()).map(|t| t.to_string()).collect();
        Self::new(values, rows, cols)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn t(&self) -> usize {
        self.values.ncols()
    }

    /// Estimation needs at least a 4 x 4 panel so every split quadrant is nonempty.
    pub fn require_estimable(&self) -> Result<()> {
        if self.n() < 4 || self.t() < 4 {
            return Err(UfmError::InvalidPanel(format!(
                "estimation needs N >= 4 and T >= 4, got {}x{}",
                self.n(),
                self.t()
            )));
        }
        Ok(())
    }

    /// Default half-width of the parameter box: `10 * max|Y| / min(1, sd(Y))`.
    pub fn default_box_bound(&self) -> f64 {
        let n = self.values.len() as f64;
        let max_abs = self.values.amax();
        let mean = self.values.sum() / n;
        let var = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let sd = var.sqrt();
        let denom = sd.min(1.0);
        let bound = if denom > 0.0 { 10.0 * max_abs / denom } else { 10.0 * max_abs };
        if bound > 0.0 && bound.is_finite() {
            bound
        } else {
            10.0
        }
    }
}

/// Read access to panel cells, implemented by the in-memory panel and by
/// wrappers that observe which cells an estimation path touches.
pub trait PanelSource: Sync {
    fn n(&self) -> usize;
    fn t(&self) -> usize;
    fn value(&self, i: usize, t: usize) -> f64;

    /// Copies the sub-panel on the given row and column index sets.
    fn submatrix(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |a, b| self.value(rows[a], cols[b]))
    }
}

impl PanelSource for PanelMatrix {
    fn n(&self) -> usize {
        self.values.nrows()
    }

    fn t(&self) -> usize {
        self.values.ncols()
    }

    fn value(&self, i: usize, t: usize) -> f64 {
        self.values[(i, t)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Wide,
    Long,
}

impl std::str::FromStr for Layout {
    type Err = UfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wide" => Ok(Layout::Wide),
            "long" => Ok(Layout::Long),
            other => Err(UfmError::InvalidConfig(format!("unknown layout {other:?}"))),
        }
    }
}

fn parse_cell(raw: &str, row: usize, col: usize) -> Result<f64> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(UfmError::NonNumericCell {
            row,
            col,
            value: raw.to_string(),
        });
    }
    trimmed.parse::<f64>().map_err(|_| UfmError::NonNumericCell {
        row,
        col,
        value: raw.to_string(),
    })
}

fn is_corner_label(s: &str) -> bool {
    let s = s.trim().to_ascii_lowercase();
    s.is_empty() || s == "row" || s == "id" || s == "row_id"
}

/// Loads a panel from CSV in wide or long layout.
pub fn load_panel(path: impl AsRef<Path>, layout: Layout) -> Result<PanelMatrix> {
    let file = std::fs::File::open(path.as_ref())?;
    read_panel(file, layout)
}

pub fn read_panel<R: Read>(reader: R, layout: Layout) -> Result<PanelMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        records.push(rec.iter().map(str::to_string).collect::<Vec<_>>());
    }
    match layout {
        Layout::Wide => parse_wide(records),
        Layout::Long => parse_long(records),
    }
}

fn parse_wide(records: Vec<Vec<String>>) -> Result<PanelMatrix> {
    let mut it = records.into_iter();
    let header = it
        .next()
        .ok_or_else(|| UfmError::InvalidPanel("file has no header".into()))?;
    let rows: Vec<Vec<String>> = it.collect();
    if rows.is_empty() {
        return Err(UfmError::InvalidPanel("file has no data rows".into()));
    }
    let width = rows[0].len();
    // Row labels are present when data rows are one cell wider than the header,
    // or when the header starts with an empty/"row"/"id" corner cell.
    let labelled = width == header.len() + 1 || (width == header.len() && is_corner_label(&header[0]));
    let col_ids: Vec<String> = if labelled && width == header.len() {
        header[1..].to_vec()
    } else {
        header.clone()
    };
    let t = col_ids.len();
    let expected = if labelled { t + 1 } else { t };
    let n = rows.len();
    let mut values = DMatrix::zeros(n, t);
    let mut row_ids = Vec::with_capacity(n);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != expected {
            return Err(UfmError::RaggedRow {
                row: i + 2,
                expected,
                found: row.len(),
            });
        }
        let cells = if labelled {
            row_ids.push(row[0].clone());
            &row[1..]
        } else {
            row_ids.push((i + 1).to_string());
            &row[..]
        };
        for (c, cell) in cells.iter().enumerate() {
            values[(i, c)] = parse_cell(cell, i + 2, c + 1 + usize::from(labelled))?;
        }
    }
    PanelMatrix::new(values, row_ids, col_ids)
}

fn parse_long(records: Vec<Vec<String>>) -> Result<PanelMatrix> {
    let mut it = records.into_iter().peekable();
    if let Some(first) = it.peek() {
        let lower: Vec<String> = first.iter().map(|s| s.to_ascii_lowercase()).collect();
        if lower == ["row", "col", "value"] {
            it.next();
        }
    }
    let mut row_index: HashMap<String, usize> = HashMap::new();
    let mut col_index: HashMap<String, usize> = HashMap::new();
    let mut row_ids = Vec::new();
    let mut col_ids = Vec::new();
    let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
    for (line, rec) in it.enumerate() {
        if rec.len() != 3 {
            return Err(UfmError::RaggedRow {
                row: line + 2,
                expected: 3,
                found: rec.len(),
            });
        }
        let r = *row_index.entry(rec[0].clone()).or_insert_with(|| {
            row_ids.push(rec[0].clone());
            row_ids.len() - 1
        });
        let c = *col_index.entry(rec[1].clone()).or_insert_with(|| {
            col_ids.push(rec[1].clone());
            col_ids.len() - 1
        });
        let v = parse_cell(&rec[2], line + 2, 3)?;
        if cells.insert((r, c), v).is_some() {
            return Err(UfmError::DuplicateCell {
                row_id: rec[0].clone(),
                col_id: rec[1].clone(),
            });
        }
    }
    let (n, t) = (row_ids.len(), col_ids.len());
    if n == 0 {
        return Err(UfmError::InvalidPanel("file has no data rows".into()));
    }
    let mut values = DMatrix::zeros(n, t);
    for i in 0..n {
        for s in 0..t {
            match cells.get(&(i, s)) {
                Some(v) => values[(i, s)] = *v,
                None => {
                    return Err(UfmError::MissingCell {
                        row_id: row_ids[i].clone(),
                        col_id: col_ids[s].clone(),
                    })
                }
            }
        }
    }
    PanelMatrix::new(values, row_ids, col_ids)
}

/// Writes the panel in wide layout with a `row` corner label.
pub fn write_panel<W: Write>(panel: &PanelMatrix, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["row".to_string()];
    header.extend(panel.col_ids.iter().cloned());
    w.write_record(&header)?;
    for i in 0..panel.n() {
        let mut rec = vec![panel.row_ids[i].clone()];
        rec.extend((0..panel.t()).map(|t| format_float(panel.values[(i, t)])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_panel(panel: &PanelMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_panel(panel, &mut buf)?;
    crate::io::write_atomic(path, &buf)
}

/// Shortest decimal string that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Finite-difference stencil used at a grid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stencil {
    Central,
    Forward,
    Backward,
}

impl Stencil {
    /// Offsets (in units of `h_d`) at which loadings are needed.
    pub fn offsets(self) -> &'static [i32] {
        match self {
            Stencil::Central => &[-2, -1, 1, 2],
            Stencil::Forward => &[0, 1, 2, 3, 4],
            Stencil::Backward => &[0, -1, -2, -3, -4],
        }
    }
}

/// Equally spaced quantile levels plus the derivative bandwidth `h_d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileGrid {
    levels: Vec<f64>,
    shift: f64,
}

impl QuantileGrid {
    /// Levels `m / (M + 1)` for `m = 1..=M`.
    pub fn new(m_count: usize, shift: f64) -> Result<Self> {
        if m_count == 0 {
            return Err(UfmError::InvalidConfig("M must be at least 1".into()));
        }
        let denom = (m_count + 1) as f64;
        let mut levels = vec![0.0; m_count];
        for m in 1..=m_count {
            let lower = m.min(m_count + 1 - m);
            let tau = lower as f64 / denom;
            // mirror the lower half so that tau_m + tau_{M+1-m} == 1 exactly
            levels[m - 1] = if m == lower { tau } else { 1.0 - tau };
        }
        Self::from_levels(levels, shift)
    }

    /// Arbitrary strictly increasing levels in (0, 1).
    pub fn from_levels(levels: Vec<f64>, shift: f64) -> Result<Self> {
        if levels.is_empty() {
            return Err(UfmError::InvalidConfig("quantile grid is empty".into()));
        }
        if levels.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(UfmError::InvalidConfig("quantile levels must lie in (0,1)".into()));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(UfmError::InvalidConfig("quantile levels must be increasing".into()));
        }
        if !(shift > 0.0 && shift < levels[0]) {
            return Err(UfmError::InvalidConfig(format!(
                "h_d = {shift} must lie in (0, tau_1 = {})",
                levels[0]
            )));
        }
        Ok(Self { levels, shift })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn m_count(&self) -> usize {
        self.levels.len()
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// A one-level grid at `tau` sharing this grid's shift.
    pub fn single(tau: f64, shift: f64) -> Result<Self> {
        let shift = shift.min(tau / 2.0).min((1.0 - tau) / 2.0);
        Self::from_levels(vec![tau], shift)
    }

    /// Forward near 0, backward near 1, central otherwise.
    pub fn stencil(&self, m: usize) -> Stencil {
        let tau = self.levels[m];
        let hd = self.shift;
        let near_lo = tau - 2.0 * hd <= 0.01;
        let near_hi = tau + 2.0 * hd >= 0.99;
        match (near_lo, near_hi) {
            (false, false) => Stencil::Central,
            (true, false) => Stencil::Forward,
            (false, true) => Stencil::Backward,
            (true, true) if tau < 0.5 => Stencil::Forward,
            (true, true) => Stencil::Backward,
        }
    }

    /// True when any level needs a one-sided stencil.
    pub fn has_boundary_levels(&self) -> bool {
        (0..self.m_count()).any(|m| self.stencil(m) != Stencil::Central)
    }

    /// Shifted level `tau_m + k h_d`.
    pub fn shifted(&self, m: usize, k: i32) -> f64 {
        self.levels[m] + k as f64 * self.shift
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankChoice {
    Fixed(usize),
    Auto,
}

impl std::str::FromStr for RankChoice {
    type Err = UfmError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(RankChoice::Auto);
        }
        match s.parse::<usize>() {
            Ok(r) if r > 0 => Ok(RankChoice::Fixed(r)),
            _ => Err(UfmError::InvalidConfig(format!("rank must be a positive integer or 'auto', got {s:?}"))),
        }
    }
}

/// Tuning knobs for every estimator. `None` fields resolve from the panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub rank: RankChoice,
    /// Smoothing bandwidth; defaults to `min(N,T)^(-1/13)`.
    pub bandwidth_h: Option<f64>,
    pub kernel_order: u32,
    /// Half-width of the parameter box; defaults to [`PanelMatrix::default_box_bound`].
    pub box_bound: Option<f64>,
    pub max_outer_iters: usize,
    pub outer_tol: f64,
    pub inner_tol: f64,
    pub max_inner_iters: usize,
    /// Penalty constant of the nuclear-norm estimator.
    pub penalty_const: f64,
    /// Eigenvalue threshold for the rank estimate; defaults to `1/(12 min(N,T)^(1/3))`.
    pub rank_threshold: Option<f64>,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            rank: RankChoice::Auto,
            bandwidth_h: None,
            kernel_order: 14,
            box_bound: None,
            max_outer_iters: 500,
            outer_tol: 1e-4,
            inner_tol: 1e-7,
            max_inner_iters: 200,
            penalty_const: 0.2,
            rank_threshold: None,
            seed: 0,
        }
    }
}

pub fn default_bandwidth(n: usize, t: usize) -> f64 {
    1.0 / (n.min(t) as f64).powf(1.0 / 13.0)
}

pub fn default_rank_threshold(n: usize, t: usize) -> f64 {
    1.0 / (12.0 * (n.min(t) as f64).powf(1.0 / 3.0))
}

impl EstimatorConfig {
    pub fn with_rank(mut self, r: usize) -> Self {
        self.rank = RankChoice::Fixed(r);
        self
    }

    pub fn bandwidth(&self, n: usize, t: usize) -> f64 {
        self.bandwidth_h.unwrap_or_else(|| default_bandwidth(n, t))
    }

    pub fn rank_threshold_for(&self, n: usize, t: usize) -> f64 {
        self.rank_threshold.unwrap_or_else(|| default_rank_threshold(n, t))
    }

    pub fn box_for(&self, panel: &DMatrix<f64>) -> f64 {
        self.box_bound.unwrap_or_else(|| {
            PanelMatrix::from_matrix(panel.clone())
                .map(|p| p.default_box_bound())
                .unwrap_or(10.0)
        })
    }

    pub fn fixed_rank(&self) -> Result<usize> {
        match self.rank {
            RankChoice::Fixed(r) => Ok(r),
            RankChoice::Auto => Err(UfmError::InvalidConfig(
                "a fixed rank is required here; resolve 'auto' with the rank estimator first".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(h) = self.bandwidth_h {
            if !(h > 0.0 && h < 1.0) {
                return Err(UfmError::InvalidConfig(format!("bandwidth h = {h} must lie in (0,1)")));
            }
        }
        if self.kernel_order == 0 || self.kernel_order % 2 != 0 {
            return Err(UfmError::InvalidConfig(format!(
                "kernel order must be a positive even integer, got {}",
                self.kernel_order
            )));
        }
        if let Some(b) = self.box_bound {
            if !(b > 0.0) {
                return Err(UfmError::InvalidConfig("box bound must be positive".into()));
            }
        }
        if !(self.outer_tol > 0.0 && self.inner_tol > 0.0) {
            return Err(UfmError::InvalidConfig("tolerances must be positive".into()));
        }
        if !(self.penalty_const > 0.0) {
            return Err(UfmError::InvalidConfig("penalty constant C must be positive".into()));
        }
        if let Some(c) = self.rank_threshold {
            if !(c > 0.0) {
                return Err(UfmError::InvalidConfig("rank threshold C_r must be positive".into()));
            }
        }
        if let RankChoice::Fixed(0) = self.rank {
            return Err(UfmError::InvalidConfig("rank must be positive".into()));
        }
        Ok(())
    }
}

/// Convergence record attached to a fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub outer_iterations: usize,
    pub converged: bool,
    pub last_change: f64,
    pub warnings: Vec<Warning>,
}

/// Factors `F` (T x r), one loading matrix `Λ(τ_m)` (N x r) per grid level,
/// and the diagonal of `Σ_m Λ'Λ/(MN)` in decreasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorEstimate {
    pub factors: DMatrix<f64>,
    pub loadings: Vec<DMatrix<f64>>,
    pub eigenvalues: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

impl FactorEstimate {
    pub fn rank(&self) -> usize {
        self.factors.ncols()
    }

    pub fn t(&self) -> usize {
        self.factors.nrows()
    }

    pub fn n(&self) -> usize {
        self.loadings.first().map_or(0, |l| l.nrows())
    }

    /// `Λ(τ_m) F'`.
    pub fn common_component(&self, m: usize) -> DMatrix<f64> {
        &self.loadings[m] * self.factors.transpose()
    }

    /// Largest deviation from `F'F/T = I_r`.
    pub fn factor_orthonormality_error(&self) -> f64 {
        let t = self.t() as f64;
        let gram = self.factors.transpose() * &self.factors / t;
        let eye = DMatrix::<f64>::identity(self.rank(), self.rank());
        (gram - eye).amax()
    }

    /// `Σ_m Λ'(τ_m)Λ(τ_m)/(MN)`.
    pub fn loading_gram(&self) -> DMatrix<f64> {
        let r = self.rank();
        let mut acc = DMatrix::zeros(r, r);
        for l in &self.loadings {
            acc += l.transpose() * l;
        }
        acc / (self.loadings.len() * self.n()) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wide_csv_without_row_labels() {
        let p = read_panel("a,b\n1,2\n3,4".as_bytes(), Layout::Wide).unwrap();
        assert_eq!(p.values(), &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(p.col_ids(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn wide_csv_with_row_labels() {
        let p = read_panel("row,a,b\nx,1,2\ny,3,4".as_bytes(), Layout::Wide).unwrap();
        assert_eq!(p.row_ids(), &["x".to_string(), "y".to_string()]);
        assert_eq!(p.values()[(1, 0)], 3.0);
        let p = read_panel("a,b\nx,1,2\ny,3,4".as_bytes(), Layout::Wide).unwrap();
        assert_eq!(p.row_ids()[1], "y");
    }

    #[test]
    fn wide_errors() {
        assert!(matches!(
            read_panel("a,b\n1,x\n3,4".as_bytes(), Layout::Wide),
            Err(UfmError::NonNumericCell { .. })
        ));
        assert!(matches!(
            read_panel("a,b\n1,2\n3".as_bytes(), Layout::Wide),
            Err(UfmError::RaggedRow { .. })
        ));
        assert!(matches!(
            read_panel("a,b\n1,2\n3,".as_bytes(), Layout::Wide),
            Err(UfmError::NonNumericCell { .. })
        ));
    }

    #[test]
    fn long_layout() {
        let src = "row,col,value\nx,a,1\nx,b,2\ny,a,3\ny,b,4\n";
        let p = read_panel(src.as_bytes(), Layout::Long).unwrap();
        assert_eq!(p.values(), &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));

        let dup = "row,col,value\nx,a,1\nx,a,2\n";
        assert!(matches!(
            read_panel(dup.as_bytes(), Layout::Long),
            Err(UfmError::DuplicateCell { .. })
        ));
        let missing = "row,col,value\nx,a,1\nx,b,2\ny,a,3\n";
        assert!(matches!(
            read_panel(missing.as_bytes(), Layout::Long),
            Err(UfmError::MissingCell { .. })
        ));
    }

    #[test]
    fn grid_levels() {
        let g = QuantileGrid::new(9, 0.04).unwrap();
        let expect = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        for (a, b) in g.levels().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(QuantileGrid::new(1, 0.1).unwrap().levels(), &[0.5]);
        assert_eq!(QuantileGrid::new(3, 0.01).unwrap().levels(), &[0.25, 0.5, 0.75]);
        assert!(QuantileGrid::new(0, 0.01).is_err());
        assert!(QuantileGrid::new(9, 0.2).is_err());
    }

    #[test]
    fn grid_symmetry_is_exact() {
        for m in 1..200 {
            let g = QuantileGrid::new(m, 1e-4).unwrap();
            let lv = g.levels();
            for k in 0..m {
                assert_eq!(lv[k] + lv[m - 1 - k], 1.0, "M={m} k={k}");
            }
        }
    }

    #[test]
    fn boundary_stencils() {
        let g = QuantileGrid::new(9, 0.04).unwrap();
        assert!((0..9).all(|m| g.stencil(m) == Stencil::Central));
        let g = QuantileGrid::new(19, 0.03).unwrap();
        assert_eq!(g.stencil(0), Stencil::Forward);
        assert_eq!(g.stencil(18), Stencil::Backward);
        assert_eq!(g.stencil(9), Stencil::Central);
    }

    #[test]
    fn box_bound_default_scales_with_data() {
        let p = PanelMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let b = p.default_box_bound();
        assert!(b >= 30.0);
        let z = PanelMatrix::from_matrix(DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(z.default_box_bound(), 10.0);
    }

    #[test]
    fn rejects_non_finite() {
        let mut v = DMatrix::zeros(4, 4);
        v[(1, 2)] = f64::NAN;
        assert!(PanelMatrix::from_matrix(v).is_err());
    }
}
