//! Contingency-table data model, marginal statistics, the two null-baseline
//! expected-count estimators, and the asymptotic MSE analytics comparing
//! them.
//!
//! Convention throughout: the reference ("all other") AE row and drug column
//! sit in the last row/column after ingestion, and cells are addressed
//! row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// I×J table of report counts with cached marginals. Reference row/column
/// are always the last index after construction.
#[derive(Debug, Clone)]
pub struct ContingencyTable {
    counts: Vec<u64>,
    n_rows: usize,
    n_cols: usize,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    row_totals: Vec<u64>,
    col_totals: Vec<u64>,
    grand_total: u64,
}

impl ContingencyTable {
    /// Build from row-major counts. Rejects tables smaller than 2×2, label
    /// mismatches, duplicate labels, and empty row or column marginals
    /// (an empty marginal makes the natural expected count zero, which
    /// degenerates every Poisson model downstream).
    pub fn new(
        counts: Vec<u64>,
        n_rows: usize,
        n_cols: usize,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
    ) -> Result<Self> {
        if n_rows < 2 || n_cols < 2 {
            return Err(Error::Data(format!(
                "table must be at least 2×2, got {n_rows}×{n_cols}"
            )));
        }
        if counts.len() != n_rows * n_cols {
            return Err(Error::Data(format!(
                "counts length {} does not match {n_rows}×{n_cols}",
                counts.len()
            )));
        }
        if row_labels.len() != n_rows || col_labels.len() != n_cols {
            return Err(Error::Data("label lengths do not match table shape".into()));
        }
        for labels in [&row_labels, &col_labels] {
            let mut seen = std::collections::HashSet::new();
            for l in labels.iter() {
                if !seen.insert(l.as_str()) {
                    return Err(Error::Data(format!("duplicate label {l:?}")));
                }
            }
        }
        let mut row_totals = vec![0u64; n_rows];
        let mut col_totals = vec![0u64; n_cols];
        for i in 0..n_rows {
            for j in 0..n_cols {
                let c = counts[i * n_cols + j];
                row_totals[i] += c;
                col_totals[j] += c;
            }
        }
        if let Some(i) = row_totals.iter().position(|&t| t == 0) {
            return Err(Error::Data(format!(
                "row {:?} has no reports; remove it before fitting",
                row_labels[i]
            )));
        }
        if let Some(j) = col_totals.iter().position(|&t| t == 0) {
            return Err(Error::Data(format!(
                "column {:?} has no reports; remove it before fitting",
                col_labels[j]
            )));
        }
        let grand_total = row_totals.iter().sum();
        Ok(Self {
            counts,
            n_rows,
            n_cols,
            row_labels,
            col_labels,
            row_totals,
            col_totals,
            grand_total,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.n_cols + j]
    }

    /// Row-major count slice.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn row_total(&self, i: usize) -> u64 {
        self.row_totals[i]
    }

    pub fn col_total(&self, j: usize) -> u64 {
        self.col_totals[j]
    }

    pub fn grand_total(&self) -> u64 {
        self.grand_total
    }

    pub fn row_labels(&self) -> &[String] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[String] {
        &self.col_labels
    }

    /// Index of the reference AE row (always last).
    pub fn reference_row(&self) -> usize {
        self.n_rows - 1
    }

    /// Index of the reference drug column (always last).
    pub fn reference_col(&self) -> usize {
        self.n_cols - 1
    }

    pub fn is_reference_cell(&self, i: usize, j: usize) -> bool {
        i == self.reference_row() || j == self.reference_col()
    }

    /// Iterator over (i, j, count).
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            (0..self.n_cols).map(move |j| (i, j, self.count(i, j)))
        })
    }
}

/// Read a CSV table: header row of drug labels, first column of AE labels,
/// integer cells. The rows/columns named by the reference labels are moved
/// to the last positions.
pub fn ingest_csv(
    path: &Path,
    reference_row_label: &str,
    reference_col_label: &str,
) -> Result<ContingencyTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)?;
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))??;
    let col_labels: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    if col_labels.is_empty() {
        return Err(Error::Data(format!("{}: header has no drug columns", path.display())));
    }
    let mut row_labels = Vec::new();
    let mut rows: Vec<Vec<u64>> = Vec::new();
    for (line, rec) in records.enumerate() {
        let rec = rec?;
        let label = rec
            .get(0)
            .ok_or_else(|| Error::Data(format!("{}: row {} has no label", path.display(), line + 2)))?
            .to_owned();
        let mut cells = Vec::with_capacity(col_labels.len());
        for (j, field) in rec.iter().skip(1).enumerate() {
            let v: u64 = field.parse().map_err(|_| {
                Error::Data(format!(
                    "{}: cell ({label:?}, {:?}) is not a non-negative integer: {field:?}",
                    path.display(),
                    col_labels.get(j).map(String::as_str).unwrap_or("?")
                ))
            })?;
            cells.push(v);
        }
        if cells.len() != col_labels.len() {
            return Err(Error::Data(format!(
                "{}: row {label:?} has {} cells, expected {}",
                path.display(),
                cells.len(),
                col_labels.len()
            )));
        }
        row_labels.push(label);
        rows.push(cells);
    }
    let ref_row = row_labels
        .iter()
        .position(|l| l == reference_row_label)
        .ok_or_else(|| {
            Error::Data(format!(
                "{}: reference row {reference_row_label:?} not found",
                path.display()
            ))
        })?;
    let ref_col = col_labels
        .iter()
        .position(|l| l == reference_col_label)
        .ok_or_else(|| {
            Error::Data(format!(
                "{}: reference column {reference_col_label:?} not found",
                path.display()
            ))
        })?;
    // Rotate the reference row/column to the last positions, preserving the
    // relative order of everything else.
    let mut row_order: Vec<usize> = (0..row_labels.len()).filter(|&i| i != ref_row).collect();
    row_order.push(ref_row);
    let mut col_order: Vec<usize> = (0..col_labels.len()).filter(|&j| j != ref_col).collect();
    col_order.push(ref_col);
    let n_rows = row_labels.len();
    let n_cols = col_labels.len();
    let mut counts = Vec::with_capacity(n_rows * n_cols);
    for &i in &row_order {
        for &j in &col_order {
            counts.push(rows[i][j]);
        }
    }
    let row_labels = row_order.iter().map(|&i| row_labels[i].clone()).collect();
    let col_labels = col_order.iter().map(|&j| col_labels[j].clone()).collect();
    ContingencyTable::new(counts, n_rows, n_cols, row_labels, col_labels)
}

/// Which null-baseline estimator produced an [`ExpectedCounts`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    /// Ê_ij = N_i·N_·j / N_··
    Natural,
    /// Ẽ_ij = N_iJ·N_Ij / N_IJ
    Reference,
}

/// Expected counts under the no-signal baseline.
#[derive(Debug, Clone)]
pub struct ExpectedCounts {
    values: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
    pub kind: EstimatorKind,
}

impl ExpectedCounts {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }
}

/// Natural estimator Ê_ij = N_i·N_·j / N_··.
pub fn expected_natural(table: &ContingencyTable) -> ExpectedCounts {
    let n = table.grand_total() as f64;
    let mut values = Vec::with_capacity(table.n_cells());
    for i in 0..table.n_rows() {
        let ri = table.row_total(i) as f64;
        for j in 0..table.n_cols() {
            values.push(ri * table.col_total(j) as f64 / n);
        }
    }
    ExpectedCounts {
        values,
        n_rows: table.n_rows(),
        n_cols: table.n_cols(),
        kind: EstimatorKind::Natural,
    }
}

/// Reference-cell estimator Ẽ_ij = N_iJ·N_Ij / N_IJ, defined for every cell
/// (it reduces to the observed marginal count on reference cells).
pub fn expected_reference(table: &ContingencyTable) -> Result<ExpectedCounts> {
    let corner = table.count(table.reference_row(), table.reference_col());
    if corner == 0 {
        return Err(Error::Data(
            "reference corner count is zero; use the natural estimator instead".into(),
        ));
    }
    let corner = corner as f64;
    let jr = table.reference_col();
    let ir = table.reference_row();
    let mut values = Vec::with_capacity(table.n_cells());
    for i in 0..table.n_rows() {
        let nij = table.count(i, jr) as f64;
        for j in 0..table.n_cols() {
            values.push(nij * table.count(ir, j) as f64 / corner);
        }
    }
    Ok(ExpectedCounts {
        values,
        n_rows: table.n_rows(),
        n_cols: table.n_cols(),
        kind: EstimatorKind::Reference,
    })
}

/// One observed cell paired with its baseline expected count, the unit the
/// prior fitters consume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellObs {
    pub row: usize,
    pub col: usize,
    pub count: u64,
    pub expected: f64,
}

/// Flatten a table and its expected counts into fitter input, optionally
/// dropping the reference row and column (whose rates are pinned at 1 and
/// would otherwise distort a fitted prior).
pub fn fitting_cells(
    table: &ContingencyTable,
    expected: &ExpectedCounts,
    exclude_reference: bool,
) -> Vec<CellObs> {
    table
        .cells()
        .filter(|&(i, j, _)| !(exclude_reference && table.is_reference_cell(i, j)))
        .map(|(i, j, n)| CellObs { row: i, col: j, count: n, expected: expected.value(i, j) })
        .collect()
}

/// Population-level inputs for the asymptotic MSE formulas: true rates
/// λ_ij, marginal report probabilities p*_i· and p*_·j, and the grand total.
#[derive(Debug, Clone)]
pub struct AmseInputs {
    lambda: Vec<f64>,
    p_row: Vec<f64>,
    p_col: Vec<f64>,
    grand_total: f64,
    lbar_row: Vec<f64>,
    lbar_col: Vec<f64>,
    lbar: f64,
}

/// Output of the Theorem-2 style region check for a cell.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Theorem2Report {
    /// Whether λ̄_i·λ̄_·j falls in the region where the reference estimator
    /// has the smaller asymptotic MSE.
    pub holds: bool,
    pub a: f64,
    pub b: f64,
    /// The tested quantity λ̄_i·λ̄_·j.
    pub x: f64,
    /// Regularity check: all three reference expected counts ≥ 4. When
    /// false the report is still computed; callers should surface a warning.
    pub condition_d_ok: bool,
}

impl AmseInputs {
    pub fn new(
        lambda: Vec<f64>,
        p_row: Vec<f64>,
        p_col: Vec<f64>,
        grand_total: f64,
    ) -> Result<Self> {
        let (ni, nj) = (p_row.len(), p_col.len());
        if ni < 2 || nj < 2 || lambda.len() != ni * nj {
            return Err(Error::Config("inconsistent AMSE input shapes".into()));
        }
        if lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("lambda entries must be finite and ≥ 0".into()));
        }
        for (name, p) in [("row", &p_row), ("col", &p_col)] {
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "{name} probabilities sum to {s}, expected 1"
                )));
            }
            if p.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config(format!("{name} probabilities must be > 0")));
            }
        }
        if !(grand_total > 0.0) || !grand_total.is_finite() {
            return Err(Error::Config("grand total must be positive".into()));
        }
        let mut lbar_row = vec![0.0; ni];
        let mut lbar_col = vec![0.0; nj];
        for i in 0..ni {
            for j in 0..nj {
                let l = lambda[i * nj + j];
                lbar_row[i] += l * p_col[j];
                lbar_col[j] += l * p_row[i];
            }
        }
        let lbar = lbar_row.iter().zip(&p_row).map(|(l, p)| l * p).sum();
        Ok(Self { lambda, p_row, p_col, grand_total, lbar_row, lbar_col, lbar })
    }

    pub fn n_rows(&self) -> usize {
        self.p_row.len()
    }

    pub fn n_cols(&self) -> usize {
        self.p_col.len()
    }

    /// Population grand-total rate λ̄_·· = Σ_kl λ_kl p*_k· p*_·l.
    pub fn lambda_bar(&self) -> f64 {
        self.lbar
    }

    pub fn lambda_bar_row(&self, i: usize) -> f64 {
        self.lbar_row[i]
    }

    pub fn lambda_bar_col(&self, j: usize) -> f64 {
        self.lbar_col[j]
    }

    /// Asymptotic MSE of Ê_ij/E_ij:
    /// (λ̄_i·λ̄_·j)/(λ̄_··⁴N)·[λ̄_··(2λ_ij + λ̄_i·/p*_i· + λ̄_·j/p*_·j) − 4λ̄_i·λ̄_·j]
    /// + (λ̄_i·λ̄_·j/λ̄_··² − 1)².
    pub fn amse_natural(&self, i: usize, j: usize) -> Result<f64> {
        self.check_cell(i, j)?;
        let (lr, lc, l) = (self.lbar_row[i], self.lbar_col[j], self.lbar);
        let lij = self.lambda[i * self.n_cols() + j];
        let lead = lr * lc / (l.powi(4) * self.grand_total);
        let bracket = l * (2.0 * lij + lr / self.p_row[i] + lc / self.p_col[j]) - 4.0 * lr * lc;
        let bias = (lr * lc / (l * l) - 1.0).powi(2);
        let out = lead * bracket + bias;
        if !out.is_finite() {
            return Err(Error::Numerical(format!("non-finite AMSE at cell ({i},{j})")));
        }
        Ok(out)
    }

    /// Asymptotic MSE of Ẽ_ij/E_ij:
    /// (1/N)[1/(p*_I·p*_·J λ̄) + 1/(p*_i·p*_·J λ̄) + 1/(p*_I·p*_·j λ̄) − 1/λ̄²]
    /// + (1/λ̄ − 1)².
    pub fn amse_reference(&self, i: usize, j: usize) -> Result<f64> {
        self.check_cell(i, j)?;
        let l = self.lbar;
        let p_ri = self.p_row[self.n_rows() - 1];
        let p_cj = self.p_col[self.n_cols() - 1];
        let var = (1.0 / (p_ri * p_cj * l)
            + 1.0 / (self.p_row[i] * p_cj * l)
            + 1.0 / (p_ri * self.p_col[j] * l)
            - 1.0 / (l * l))
            / self.grand_total;
        let out = var + (1.0 / l - 1.0).powi(2);
        if !out.is_finite() {
            return Err(Error::Numerical(format!("non-finite AMSE at cell ({i},{j})")));
        }
        Ok(out)
    }

    /// Region check: with s² = (1 − 1/λ̄)² + (1/E_iJ + 1/E_Ij + 1/E_IJ)/λ̄
    /// and A,B = (1 ∓ s)·λ̄², the reference estimator wins when
    /// x = λ̄_i·λ̄_·j lies in (B, ∞) if A ≤ 1, or (1, A) ∪ (B, ∞) if A > 1.
    /// Expected counts here are null-baseline: E_xy = N p*_x p*_y.
    pub fn theorem2_condition(&self, i: usize, j: usize) -> Result<Theorem2Report> {
        self.check_cell(i, j)?;
        let l = self.lbar;
        if !(l > 0.0) {
            return Err(Error::Numerical("overall rate λ̄ must be positive".into()));
        }
        let n = self.grand_total;
        let p_ri = self.p_row[self.n_rows() - 1];
        let p_cj = self.p_col[self.n_cols() - 1];
        let e_ij_ref = n * self.p_row[i] * p_cj;
        let e_rj = n * p_ri * self.p_col[j];
        let e_corner = n * p_ri * p_cj;
        let s = ((1.0 - 1.0 / l).powi(2)
            + (1.0 / e_ij_ref + 1.0 / e_rj + 1.0 / e_corner) / l)
            .sqrt();
        let a = (1.0 - s) * l * l;
        let b = (1.0 + s) * l * l;
        let x = self.lbar_row[i] * self.lbar_col[j];
        let holds = if a <= 1.0 { x > b } else { (x > 1.0 && x < a) || x > b };
        Ok(Theorem2Report {
            holds,
            a,
            b,
            x,
            condition_d_ok: e_ij_ref >= 4.0 && e_rj >= 4.0 && e_corner >= 4.0,
        })
    }

    fn check_cell(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.n_rows() || j >= self.n_cols() {
            return Err(Error::Config(format!("cell ({i},{j}) out of range")));
        }
        Ok(())
    }
}
