//! Tabular data: CSV ingestion, vertical fragmentation and train/test splits.
//!
//! Rows carry a `row_id` assigned in file order. Every fragment produced by
//! [`partition_vertical`] keeps every row and the class label, so sites can
//! agree on row membership from a shared [`SplitPlan`] alone.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("cannot split {attributes} attributes across {sites} sites")]
    TooManySites { sites: usize, attributes: usize },
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One record: its identifier, attribute values and class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub row_id: u64,
    pub values: Vec<f64>,
    pub class_label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub attribute_names: Vec<String>,
    pub label_name: String,
    pub rows: Vec<Row>,
}

/// A vertical fragment of a [`Table`] held by one site.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedTable {
    pub site_id: u32,
    pub attribute_names: Vec<String>,
    /// Position of each attribute in the parent table. Keys the noise streams.
    pub attribute_indices: Vec<usize>,
    pub label_name: String,
    pub rows: Vec<Row>,
}

/// Selects the label column by header name or zero-based index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

impl FromStr for LabelColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(s.to_string()),
        })
    }
}

impl fmt::Display for LabelColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelColumn::Index(i) => write!(f, "{i}"),
            LabelColumn::Name(n) => f.write_str(n),
        }
    }
}

impl Table {
    pub fn num_attributes(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct class labels in lexicographic order.
    pub fn class_labels(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.class_label.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Checks the structural invariants: value arity, strictly increasing ids
    /// and finite values.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let width = self.attribute_names.len();
        let mut prev: Option<u64> = None;
        for (pos, row) in self.rows.iter().enumerate() {
            if row.values.len() != width {
                return Err(DatasetError::Schema(format!(
                    "row {pos} has {} values, expected {width}",
                    row.values.len()
                )));
            }
            if let Some(p) = prev {
                if row.row_id <= p {
                    return Err(DatasetError::Schema(format!(
                        "row ids not strictly increasing at position {pos}"
                    )));
                }
            }
            if let Some(i) = row.values.iter().position(|v| !v.is_finite()) {
                return Err(DatasetError::Parse {
                    row: pos,
                    column: self.attribute_names[i].clone(),
                    message: "non-finite value".into(),
                });
            }
            prev = Some(row.row_id);
        }
        Ok(())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> DatasetError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        csv::ErrorKind::UnequalLengths { pos, expected_len, len } => DatasetError::Parse {
            row: pos.map(|p| p.record() as usize).unwrap_or(0),
            column: String::new(),
            message: format!("ragged row: {len} fields, expected {expected_len}"),
        },
        other => DatasetError::Schema(format!("{other:?}")),
    }
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64, DatasetError> {
    let v: f64 = cell.trim().parse().map_err(|_| DatasetError::Parse {
        row,
        column: column.to_string(),
        message: format!("`{cell}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(DatasetError::Parse {
            row,
            column: column.to_string(),
            message: format!("`{cell}` is not finite"),
        });
    }
    Ok(v)
}

/// Reads a headed CSV file. Row ids are assigned `0..n` in file order and the
/// label column may sit anywhere. Rows are counted from 0, excluding the header.
pub fn load_csv(path: impl AsRef<Path>, label: &LabelColumn) -> Result<Table, DatasetError> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let label_idx = match label {
        LabelColumn::Index(i) if *i < headers.len() => *i,
        LabelColumn::Index(i) => {
            return Err(DatasetError::Schema(format!(
                "label column index {i} out of range ({} columns)",
                headers.len()
            )))
        }
        LabelColumn::Name(n) => headers.iter().position(|h| h == n).ok_or_else(|| {
            DatasetError::Schema(format!("label column `{n}` not found in header"))
        })?,
    };
    let attribute_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut rows = Vec::new();
    for (pos, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let mut values = Vec::with_capacity(attribute_names.len());
        let mut class_label = String::new();
        for (i, cell) in record.iter().enumerate() {
            if i == label_idx {
                class_label = cell.to_string();
            } else {
                values.push(parse_cell(cell, pos, &headers[i])?);
            }
        }
        rows.push(Row {
            row_id: pos as u64,
            values,
            class_label,
        });
    }

    let table = Table {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        attribute_names,
        label_name: headers[label_idx].clone(),
        rows,
    };
    if table.is_empty() {
        return Err(DatasetError::EmptyDataset("no data rows".into()));
    }
    if table.class_labels().len() < 2 {
        return Err(DatasetError::EmptyDataset(
            "fewer than two distinct class labels".into(),
        ));
    }
    Ok(table)
}

/// Splits attributes into `num_sites` contiguous, order-preserving blocks whose
/// sizes differ by at most one; earlier sites take the extra attributes.
pub fn partition_vertical(
    table: &Table,
    num_sites: usize,
) -> Result<Vec<PartitionedTable>, DatasetError> {
    let attrs = table.num_attributes();
    if num_sites == 0 || num_sites > attrs {
        return Err(DatasetError::TooManySites {
            sites: num_sites,
            attributes: attrs,
        });
    }
    let base = attrs / num_sites;
    let extra = attrs % num_sites;
    let mut start = 0;
    let mut out = Vec::with_capacity(num_sites);
    for site in 0..num_sites {
        let size = base + usize::from(site < extra);
        let range = start..start + size;
        out.push(PartitionedTable {
            site_id: site as u32,
            attribute_names: table.attribute_names[range.clone()].to_vec(),
            attribute_indices: range.clone().collect(),
            label_name: table.label_name.clone(),
            rows: table
                .rows
                .iter()
                .map(|r| Row {
                    row_id: r.row_id,
                    values: r.values[range.clone()].to_vec(),
                    class_label: r.class_label.clone(),
                })
                .collect(),
        });
        start += size;
    }
    Ok(out)
}

/// Joins fragments back on `row_id`. Attribute order follows the fragments'
/// parent indices.
pub fn reassemble(name: &str, fragments: &[PartitionedTable]) -> Result<Table, DatasetError> {
    let first = fragments
        .first()
        .ok_or_else(|| DatasetError::Schema("no fragments".into()))?;
    let mut columns: Vec<(usize, usize, usize)> = Vec::new(); // (parent index, fragment, local)
    for (f, frag) in fragments.iter().enumerate() {
        if frag.rows.len() != first.rows.len() {
            return Err(DatasetError::Schema(format!(
                "fragment {} has {} rows, expected {}",
                frag.site_id,
                frag.rows.len(),
                first.rows.len()
            )));
        }
        for (local, &idx) in frag.attribute_indices.iter().enumerate() {
            columns.push((idx, f, local));
        }
    }
    columns.sort_unstable();
    let attribute_names = columns
        .iter()
        .map(|&(_, f, l)| fragments[f].attribute_names[l].clone())
        .collect();
    let mut rows = Vec::with_capacity(first.rows.len());
    for (pos, head) in first.rows.iter().enumerate() {
        for frag in fragments {
            let r = &frag.rows[pos];
            if r.row_id != head.row_id || r.class_label != head.class_label {
                return Err(DatasetError::Schema(format!(
                    "fragment {} disagrees on row {}",
                    frag.site_id, head.row_id
                )));
            }
        }
        rows.push(Row {
            row_id: head.row_id,
            values: columns
                .iter()
                .map(|&(_, f, l)| fragments[f].rows[pos].values[l])
                .collect(),
            class_label: head.class_label.clone(),
        });
    }
    Ok(Table {
        name: name.to_string(),
        attribute_names,
        label_name: first.label_name.clone(),
        rows,
    })
}

/// Writes a fragment as CSV with header `row_id,<attributes...>,<label>`.
pub fn write_fragment_csv(
    fragment: &PartitionedTable,
    path: impl AsRef<Path>,
) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["row_id".to_string()];
    header.extend(fragment.attribute_names.iter().cloned());
    header.push(fragment.label_name.clone());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for row in &fragment.rows {
        let mut rec = vec![row.row_id.to_string()];
        rec.extend(row.values.iter().map(|v| v.to_string()));
        rec.push(row.class_label.clone());
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a fragment written by [`write_fragment_csv`]. `first_attribute` is the
/// parent-table position of the fragment's first column.
pub fn load_fragment_csv(
    path: impl AsRef<Path>,
    site_id: u32,
    first_attribute: usize,
) -> Result<PartitionedTable, DatasetError> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.len() < 3 || headers[0] != "row_id" {
        return Err(DatasetError::Schema(
            "fragment header must be `row_id,<attributes...>,<label>`".into(),
        ));
    }
    let attribute_names = headers[1..headers.len() - 1].to_vec();
    let mut rows = Vec::new();
    let mut prev: Option<u64> = None;
    for (pos, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let row_id: u64 = record[0].parse().map_err(|_| DatasetError::Parse {
            row: pos,
            column: "row_id".into(),
            message: format!("`{}` is not a row id", &record[0]),
        })?;
        if prev.is_some_and(|p| row_id <= p) {
            return Err(DatasetError::Schema(format!(
                "row ids not strictly increasing at row {pos}"
            )));
        }
        prev = Some(row_id);
        let values = (1..headers.len() - 1)
            .map(|i| parse_cell(&record[i], pos, &headers[i]))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(Row {
            row_id,
            values,
            class_label: record[headers.len() - 1].to_string(),
        });
    }
    if rows.is_empty() {
        return Err(DatasetError::EmptyDataset("fragment has no rows".into()));
    }
    Ok(PartitionedTable {
        site_id,
        attribute_indices: (first_attribute..first_attribute + attribute_names.len()).collect(),
        attribute_names,
        label_name: headers[headers.len() - 1].clone(),
        rows,
    })
}

/// Parameters of the repeated validation scheme shared by every site.
///
/// Splits are drawn from ChaCha20 (`rand_chacha`) seeded with
/// `seed_from_u64(seed)` and stream number equal to the repeat index, then a
/// Fisher-Yates shuffle of `0..n`. Both algorithms are platform independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train_fraction: f64,
    pub repeats: usize,
    /// When set, each repeat is a k-fold cross-validation instead of a holdout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            seed: 42,
            train_fraction: 0.5,
            repeats: 10,
            folds: None,
        }
    }
}

impl SplitPlan {
    /// Number of (train, test) pairs the plan produces.
    pub fn num_splits(&self) -> usize {
        self.repeats * self.folds.unwrap_or(1)
    }
}

/// Train and test positions, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn permutation(n: usize, seed: u64, repeat: usize) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(repeat as u64);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng);
    ids
}

/// Generates the plan's splits over positions `0..n_rows` (positions index
/// rows in `row_id` order). Holdout plans yield `repeats` splits cut at
/// `round(train_fraction * n_rows)`; fold plans yield `repeats * folds`.
pub fn generate_splits(n_rows: usize, plan: &SplitPlan) -> Result<Vec<Split>, DatasetError> {
    if n_rows < 2 {
        return Err(DatasetError::DegenerateSplit(format!(
            "need at least 2 rows, got {n_rows}"
        )));
    }
    if plan.repeats == 0 {
        return Err(DatasetError::DegenerateSplit("zero repeats".into()));
    }
    match plan.folds {
        None => {
            if !(plan.train_fraction > 0.0 && plan.train_fraction < 1.0) {
                return Err(DatasetError::DegenerateSplit(format!(
                    "train fraction {} outside (0, 1)",
                    plan.train_fraction
                )));
            }
            let cut = (plan.train_fraction * n_rows as f64).round() as usize;
            if cut == 0 || cut >= n_rows {
                return Err(DatasetError::DegenerateSplit(format!(
                    "train size {cut} of {n_rows} leaves a side empty"
                )));
            }
            Ok((0..plan.repeats)
                .map(|rep| {
                    let perm = permutation(n_rows, plan.seed, rep);
                    let mut train = perm[..cut].to_vec();
                    let mut test = perm[cut..].to_vec();
                    train.sort_unstable();
                    test.sort_unstable();
                    Split { train, test }
                })
                .collect())
        }
        Some(k) => {
            if k < 2 || k > n_rows {
                return Err(DatasetError::DegenerateSplit(format!(
                    "{k} folds over {n_rows} rows"
                )));
            }
            let mut out = Vec::with_capacity(plan.repeats * k);
            for rep in 0..plan.repeats {
                let perm = permutation(n_rows, plan.seed, rep);
                let (base, extra) = (n_rows / k, n_rows % k);
                let mut start = 0;
                for fold in 0..k {
                    let size = base + usize::from(fold < extra);
                    let mut test = perm[start..start + size].to_vec();
                    let mut train: Vec<usize> = perm[..start]
                        .iter()
                        .chain(&perm[start + size..])
                        .copied()
                        .collect();
                    test.sort_unstable();
                    train.sort_unstable();
                    out.push(Split { train, test });
                    start += size;
                }
            }
            Ok(out)
        }
    }
}
