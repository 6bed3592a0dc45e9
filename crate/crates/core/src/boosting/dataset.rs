use rayon::prelude::*;

use crate::error::{Error, Result};

/// Column-sparse training matrix. Cells that are absent from a column are
/// missing (the sentinel) and are routed by each split's default direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_rows: usize,
    row_keys: Vec<u64>,
    feature_names: Vec<String>,
    columns: Vec<Vec<(u32, f64)>>,
}

impl Dataset {
    /// `columns[j]` holds `(row, value)` pairs for present cells.
    pub fn new(n_rows: usize, feature_names: Vec<String>, mut columns: Vec<Vec<(u32, f64)>>) -> Result<Self> {
        if feature_names.len() != columns.len() {
            return Err(Error::SchemaMismatch(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                columns.len()
            )));
        }
        for (j, col) in columns.iter_mut().enumerate() {
            col.sort_by_key(|&(r, _)| r);
            for w in col.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::InvalidArgument(format!("duplicate cell in column {j}, row {}", w[0].0)));
                }
            }
            for &(r, v) in col.iter() {
                if r as usize >= n_rows {
                    return Err(Error::InvalidArgument(format!("row {r} out of range in column {j}")));
                }
                if !v.is_finite() {
                    return Err(Error::NonFinite { column: j });
                }
            }
        }
        Ok(Self {
            n_rows,
            row_keys: (0..n_rows as u64).collect(),
            feature_names,
            columns,
        })
    }

    /// Builds from dense rows; cells equal to `sentinel` become missing.
    pub fn from_dense(rows: &[Vec<f64>], feature_names: Vec<String>, sentinel: f64) -> Result<Self> {
        let n_cols = feature_names.len();
        let mut columns = vec![Vec::new(); n_cols];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(Error::SchemaMismatch(format!(
                    "row {i} has {} values, expected {n_cols}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if v == sentinel {
                    continue;
                }
                if !v.is_finite() {
                    return Err(Error::NonFinite { column: j });
                }
                columns[j].push((i as u32, v));
            }
        }
        Self::new(rows.len(), feature_names, columns)
    }

    /// Replaces the stable per-row keys used for keyed subsampling.
    pub fn with_row_keys(mut self, keys: Vec<u64>) -> Result<Self> {
        if keys.len() != self.n_rows {
            return Err(Error::InvalidArgument("row key count differs from row count".into()));
        }
        self.row_keys = keys;
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn row_keys(&self) -> &[u64] {
        &self.row_keys
    }

    pub fn column(&self, j: usize) -> &[(u32, f64)] {
        &self.columns[j]
    }

    pub fn nnz(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    /// Cell value, `None` when missing.
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let c = &self.columns[col];
        c.binary_search_by_key(&(row as u32), |&(r, _)| r).ok().map(|i| c[i].1)
    }

    /// New dataset holding `rows` in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let mut remap = vec![u32::MAX; self.n_rows];
        for (new, &old) in rows.iter().enumerate() {
            remap[old] = new as u32;
        }
        let columns = self
            .columns
            .par_iter()
            .map(|col| {
                let mut out: Vec<(u32, f64)> = col
                    .iter()
                    .filter_map(|&(r, v)| {
                        let n = remap[r as usize];
                        (n != u32::MAX).then_some((n, v))
                    })
                    .collect();
                out.sort_by_key(|&(r, _)| r);
                out
            })
            .collect();
        Dataset {
            n_rows: rows.len(),
            row_keys: rows.iter().map(|&r| self.row_keys[r]).collect(),
            feature_names: self.feature_names.clone(),
            columns,
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> Dataset {
        Dataset {
            n_rows: self.n_rows,
            row_keys: self.row_keys.clone(),
            feature_names: cols.iter().map(|&j| self.feature_names[j].clone()).collect(),
            columns: cols.iter().map(|&j| self.columns[j].clone()).collect(),
        }
    }

    pub(crate) fn row_major(&self) -> RowMajor {
        let mut counts = vec![0usize; self.n_rows + 1];
        for col in &self.columns {
            for &(r, _) in col {
                counts[r as usize + 1] += 1;
            }
        }
        for i in 0..self.n_rows {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let nnz = counts[self.n_rows];
        let mut cols = vec![0u32; nnz];
        let mut vals = vec![0.0; nnz];
        // columns visited in ascending order keep each row's entries sorted
        for (j, col) in self.columns.iter().enumerate() {
            for &(r, v) in col {
                let k = fill[r as usize];
                cols[k] = j as u32;
                vals[k] = v;
                fill[r as usize] += 1;
            }
        }
        RowMajor {
            offsets: counts,
            cols,
            vals,
        }
    }
}

/// CSR view used for prediction.
pub(crate) struct RowMajor {
    offsets: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl RowMajor {
    pub(crate) fn row(&self, i: usize) -> SparseRow<'_> {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        SparseRow {
            cols: &self.cols[a..b],
            vals: &self.vals[a..b],
        }
    }
}

/// Read access to one row's cells.
pub trait RowView {
    fn value(&self, feature: usize) -> Option<f64>;
}

#[derive(Clone, Copy)]
pub(crate) struct SparseRow<'a> {
    cols: &'a [u32],
    vals: &'a [f64],
}

impl RowView for SparseRow<'_> {
    fn value(&self, feature: usize) -> Option<f64> {
        self.cols
            .binary_search(&(feature as u32))
            .ok()
            .map(|i| self.vals[i])
    }
}

/// Dense row with an explicit sentinel marking missing cells.
pub struct DenseRow<'a> {
    pub values: &'a [f64],
    pub sentinel: f64,
}

impl RowView for DenseRow<'_> {
    fn value(&self, feature: usize) -> Option<f64> {
        let v = self.values[feature];
        (v != self.sentinel).then_some(v)
    }
}
