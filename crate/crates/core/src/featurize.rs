//! Recency encoding: for each cohort member and concept, the number of days
//! between the most recent in-window occurrence and the index date.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boosting::Dataset;
use crate::cohort::{CohortLabel, Label};
use crate::ehr::{Domain, EventStore, PersonId};
use crate::error::{Error, Result};

/// Marks "no occurrence inside the observation window".
pub const SENTINEL: u32 = 999_999;

pub const DEFAULT_WINDOW_DAYS: u32 = 730;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub concept_code: String,
    pub domain: Domain,
}

/// Persons x concepts, stored column-sparse: only non-sentinel cells exist.
#[derive(Debug, Clone, PartialEq)]
pub struct RecencyFeatureMatrix {
    row_ids: Vec<PersonId>,
    columns: Vec<FeatureColumn>,
    cells: Vec<Vec<(u32, u32)>>,
    labels: Vec<bool>,
    window_days: u32,
}

impl RecencyFeatureMatrix {
    /// `cells[j]` holds `(row, days)` pairs; rows must be unique per column.
    pub fn new(
        row_ids: Vec<PersonId>,
        columns: Vec<FeatureColumn>,
        mut cells: Vec<Vec<(u32, u32)>>,
        labels: Vec<bool>,
        window_days: u32,
    ) -> Result<Self> {
        if labels.len() != row_ids.len() {
            return Err(Error::SchemaMismatch("labels length differs from row count".into()));
        }
        if cells.len() != columns.len() {
            return Err(Error::SchemaMismatch("cell lists differ from column count".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &columns {
            if !seen.insert(c.concept_code.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate column {}", c.concept_code)));
            }
        }
        for (j, col) in cells.iter_mut().enumerate() {
            col.sort_unstable();
            for w in col.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::InvalidArgument(format!("duplicate cell in column {j}")));
                }
            }
            if let Some(&(r, v)) = col.iter().find(|&&(r, v)| r as usize >= row_ids.len() || v > window_days) {
                return Err(Error::InvalidArgument(format!(
                    "cell ({r}, {v}) in column {} out of range",
                    columns[j].concept_code
                )));
            }
        }
        Ok(Self {
            row_ids,
            columns,
            cells,
            labels,
            window_days,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row_ids(&self) -> &[PersonId] {
        &self.row_ids
    }

    pub fn columns(&self) -> &[FeatureColumn] {
        &self.columns
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn window_days(&self) -> u32 {
        self.window_days
    }

    pub fn column_cells(&self, j: usize) -> &[(u32, u32)] {
        &self.cells[j]
    }

    pub fn column_index(&self, code: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.concept_code == code)
    }

    pub fn value(&self, row: usize, col: usize) -> u32 {
        let c = &self.cells[col];
        c.binary_search_by_key(&(row as u32), |&(r, _)| r)
            .map_or(SENTINEL, |i| c[i].1)
    }

    /// Dense column with the sentinel filled in.
    pub fn dense_column(&self, col: usize) -> Vec<u32> {
        let mut out = vec![SENTINEL; self.n_rows()];
        for &(r, v) in &self.cells[col] {
            out[r as usize] = v;
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Self {
            row_ids: self.row_ids.clone(),
            columns: cols.iter().map(|&j| self.columns[j].clone()).collect(),
            cells: cols.iter().map(|&j| self.cells[j].clone()).collect(),
            labels: self.labels.clone(),
            window_days: self.window_days,
        }
    }

    /// Keeps the named columns in the given order; unknown codes are an error.
    pub fn select_codes<S: AsRef<str>>(&self, codes: &[S]) -> Result<Self> {
        let index: HashMap<&str, usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| (c.concept_code.as_str(), j))
            .collect();
        let cols = codes
            .iter()
            .map(|c| {
                index
                    .get(c.as_ref())
                    .copied()
                    .ok_or_else(|| Error::SchemaMismatch(format!("no column {}", c.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_columns(&cols))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut remap = vec![u32::MAX; self.n_rows()];
        for (new, &old) in rows.iter().enumerate() {
            remap[old] = new as u32;
        }
        let cells = self
            .cells
            .iter()
            .map(|col| {
                let mut out: Vec<(u32, u32)> = col
                    .iter()
                    .filter_map(|&(r, v)| {
                        let n = remap[r as usize];
                        (n != u32::MAX).then_some((n, v))
                    })
                    .collect();
                out.sort_unstable();
                out
            })
            .collect();
        Self {
            row_ids: rows.iter().map(|&r| self.row_ids[r]).collect(),
            columns: self.columns.clone(),
            cells,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            window_days: self.window_days,
        }
    }

    /// Training view for the tree learner; row keys are person ids so that
    /// row subsampling does not depend on row order.
    pub fn to_dataset(&self) -> Dataset {
        let columns = self
            .cells
            .iter()
            .map(|c| c.iter().map(|&(r, v)| (r, v as f64)).collect())
            .collect();
        Dataset::new(
            self.n_rows(),
            self.columns.iter().map(|c| c.concept_code.clone()).collect(),
            columns,
        )
        .and_then(|d| d.with_row_keys(self.row_ids.iter().map(|p| p.0).collect()))
        .expect("matrix invariants guarantee a valid dataset")
    }

    /// Sparse triplets `person_id,concept_code,recency_days`; sentinel cells omitted.
    pub fn write_triplets(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["person_id", "concept_code", "recency_days"])?;
        let mut rows: Vec<Vec<(usize, u32)>> = vec![Vec::new(); self.n_rows()];
        for (j, col) in self.cells.iter().enumerate() {
            for &(r, v) in col {
                rows[r as usize].push((j, v));
            }
        }
        for (i, cells) in rows.iter().enumerate() {
            let id = self.row_ids[i].to_string();
            for &(j, v) in cells {
                w.write_record([id.as_str(), &self.columns[j].concept_code, &v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Column list `concept_code,domain`.
    pub fn write_columns(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["concept_code", "domain"])?;
        for c in &self.columns {
            w.write_record([c.concept_code.as_str(), c.domain.as_str()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Rebuilds a matrix from the triplet and column files plus the cohort
    /// (which fixes row order and labels).
    pub fn read(triplets: &Path, columns_path: &Path, cohort: &[CohortLabel], window_days: u32) -> Result<Self> {
        #[derive(Deserialize)]
        struct ColRow {
            concept_code: String,
            domain: String,
        }
        #[derive(Deserialize)]
        struct Triplet {
            person_id: u64,
            concept_code: String,
            recency_days: u32,
        }
        let mut columns = Vec::new();
        for row in csv::Reader::from_path(columns_path)?.deserialize() {
            let r: ColRow = row?;
            let domain = Domain::parse(&r.domain)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown domain {}", r.domain)))?;
            columns.push(FeatureColumn {
                concept_code: r.concept_code,
                domain,
            });
        }
        let col_index: HashMap<String, usize> = columns
            .iter()
            .enumerate()
            .map(|(j, c)| (c.concept_code.clone(), j))
            .collect();
        let row_index: HashMap<PersonId, usize> = cohort.iter().enumerate().map(|(i, c)| (c.person_id, i)).collect();
        let mut cells = vec![Vec::new(); columns.len()];
        for row in csv::Reader::from_path(triplets)?.deserialize() {
            let t: Triplet = row?;
            let r = *row_index
                .get(&PersonId(t.person_id))
                .ok_or(Error::UnknownPerson(PersonId(t.person_id)))?;
            let j = *col_index
                .get(&t.concept_code)
                .ok_or_else(|| Error::SchemaMismatch(format!("triplet column {} not in column list", t.concept_code)))?;
            cells[j].push((r as u32, t.recency_days));
        }
        Self::new(
            cohort.iter().map(|c| c.person_id).collect(),
            columns,
            cells,
            cohort.iter().map(|c| c.label == Label::Target).collect(),
            window_days,
        )
    }
}

/// Encodes every cohort member over the `window_days` ending at their index
/// date. Columns are all concepts seen in-window for at least one member,
/// sorted by code.
pub fn encode_recency(store: &EventStore, cohort: &[CohortLabel], window_days: u32) -> Result<RecencyFeatureMatrix> {
    let per_person: Vec<BTreeMap<u32, u32>> = cohort
        .par_iter()
        .map(|c| {
            let events = store.events_in_window(c.person_id, c.index_date, window_days)?;
            let mut last: BTreeMap<u32, u32> = BTreeMap::new();
            for e in events {
                let days = (c.index_date - e.date).num_days() as u32;
                last.entry(e.concept)
                    .and_modify(|d| *d = (*d).min(days))
                    .or_insert(days);
            }
            Ok(last)
        })
        .collect::<Result<_>>()?;

    let mut used: BTreeSet<u32> = BTreeSet::new();
    for m in &per_person {
        used.extend(m.keys().copied());
    }
    let mut concept_ids: Vec<u32> = used.into_iter().collect();
    concept_ids.sort_by(|&a, &b| store.concept(a).code.cmp(&store.concept(b).code));
    let col_of: HashMap<u32, usize> = concept_ids.iter().enumerate().map(|(j, &c)| (c, j)).collect();

    let mut cells = vec![Vec::new(); concept_ids.len()];
    for (i, m) in per_person.iter().enumerate() {
        for (c, &days) in m {
            cells[col_of[c]].push((i as u32, days));
        }
    }
    let columns = concept_ids
        .iter()
        .map(|&c| {
            let concept = store.concept(c);
            FeatureColumn {
                concept_code: concept.code.clone(),
                domain: concept.domain,
            }
        })
        .collect();
    RecencyFeatureMatrix::new(
        cohort.iter().map(|c| c.person_id).collect(),
        columns,
        cells,
        cohort.iter().map(|c| c.label == Label::Target).collect(),
        window_days,
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StripReport {
    pub removed: Vec<String>,
    /// Every column was a leakage code.
    pub emptied: bool,
}

/// Drops every column whose code is in `crs_codes`.
pub fn strip_leakage<S: AsRef<str> + Ord>(
    matrix: &RecencyFeatureMatrix,
    crs_codes: &BTreeSet<S>,
) -> (RecencyFeatureMatrix, StripReport) {
    let is_crs = |code: &str| crs_codes.iter().any(|c| c.as_ref() == code);
    let (keep, drop): (Vec<usize>, Vec<usize>) =
        (0..matrix.n_cols()).partition(|&j| !is_crs(&matrix.columns[j].concept_code));
    let emptied = keep.is_empty() && matrix.n_cols() > 0;
    if emptied {
        log::warn!("leakage removal dropped all {} feature columns", matrix.n_cols());
    }
    let report = StripReport {
        removed: drop.iter().map(|&j| matrix.columns[j].concept_code.clone()).collect(),
        emptied,
    };
    (matrix.select_columns(&keep), report)
}
