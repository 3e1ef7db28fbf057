//! Raw tables, schema inference, the fit/transform preprocessing pipeline and
//! stratified splitting.
//!
//! The pipeline drops columns that are missing everywhere, imputes the rest
//! (mean for numerical columns, mode for categorical ones), encodes
//! categorical columns with backward-difference contrasts and min-max scales
//! every output column into `[0, 1]`. All statistics come from the table the
//! preprocessor is fitted on.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

/// Version tag written into every serialized [`PreprocessorState`].
pub const PREPROCESSOR_SCHEMA_VERSION: u32 = 1;

/// Default distinct-value count at or below which a column is treated as categorical.
pub const DEFAULT_MAX_CATEGORICAL_CARDINALITY: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("table is empty")]
    Empty,
    #[error("schema describes {schema} columns but the table has {table}")]
    SchemaMismatch { schema: usize, table: usize },
    #[error("schema column {index} is `{schema}` but the table column is `{table}`")]
    SchemaNameMismatch { index: usize, schema: String, table: String },
    #[error("no columns survive preprocessing")]
    NoColumns,
    #[error("column `{column}` is missing from the table")]
    MissingColumn { column: String },
    #[error("row {row}, column `{column}`: `{value}` is not a finite number")]
    NotNumeric { row: usize, column: String, value: String },
    #[error("row {row}, column `{column}`: unseen category `{value}`")]
    UnseenCategory { row: usize, column: String, value: String },
    #[error("row {row}: unknown label `{value}`")]
    UnknownLabel { row: usize, value: String },
    #[error("split fractions must be positive and sum to 1, got ({0}, {1}, {2})")]
    BadFractions(f64, f64, f64),
    #[error("class `{class}` has {count} samples, fewer than the {splits} requested splits")]
    ClassTooSmall { class: String, count: usize, splits: usize },
    #[error("dataset has no labels")]
    Unlabeled,
}

/// A table of raw cell strings. `None` is the single missing-value sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    names: Vec<String>,
    /// Column-major cells.
    columns: Vec<Vec<Option<String>>>,
    labels: Option<Vec<Option<String>>>,
    n_rows: usize,
}

impl RawTable {
    /// Builds a table from column-major cells. Panics if the columns have
    /// different lengths or the names are not one per column.
    pub fn new(
        names: Vec<String>,
        columns: Vec<Vec<Option<String>>>,
        labels: Option<Vec<Option<String>>>,
    ) -> Self {
        assert_eq!(names.len(), columns.len(), "one name per column");
        let n_rows = columns
            .first()
            .map(Vec::len)
            .or_else(|| labels.as_ref().map(Vec::len))
            .unwrap_or(0);
        assert!(columns.iter().all(|c| c.len() == n_rows), "ragged columns");
        if let Some(l) = &labels {
            assert_eq!(l.len(), n_rows, "label length mismatch");
        }
        Self { names, columns, labels, n_rows }
    }

    /// Convenience constructor for already-numeric data (used by the
    /// synthetic generators and tests).
    pub fn from_numeric(names: Vec<String>, x: &Matrix, labels: Option<&[usize]>) -> Self {
        let columns = (0..x.cols())
            .map(|j| (0..x.rows()).map(|i| Some(format!("{}", x.get(i, j)))).collect())
            .collect();
        let labels = labels.map(|l| l.iter().map(|v| Some(v.to_string())).collect());
        Self::new(names, columns, labels)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[Option<String>] {
        &self.columns[j]
    }

    pub fn column_by_name(&self, name: &str) -> Option<&[Option<String>]> {
        self.names.iter().position(|n| n == name).map(|j| self.columns[j].as_slice())
    }

    pub fn labels(&self) -> Option<&[Option<String>]> {
        self.labels.as_deref()
    }

    /// Rows `idx` (in that order) of every column and of the labels.
    pub fn select_rows(&self, idx: &[usize]) -> RawTable {
        let pick = |c: &Vec<Option<String>>| idx.iter().map(|&i| c[i].clone()).collect::<Vec<_>>();
        RawTable {
            names: self.names.clone(),
            columns: self.columns.iter().map(pick).collect(),
            labels: self.labels.as_ref().map(pick),
            n_rows: idx.len(),
        }
    }

    pub fn is_all_missing(&self, j: usize) -> bool {
        self.columns[j].iter().all(Option::is_none)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numerical,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    /// Distinct raw values in first-appearance order; categorical columns only.
    pub categories: Vec<String>,
    pub all_missing: bool,
}

fn parse_finite(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Classifies every column as numerical or categorical.
///
/// A column is categorical when any present cell fails to parse as a finite
/// number, or when it has at most `max_categorical_cardinality` distinct values.
pub fn infer_schema(table: &RawTable, max_categorical_cardinality: usize) -> Vec<ColumnSchema> {
    (0..table.n_cols())
        .map(|j| {
            let name = table.names()[j].clone();
            if table.is_all_missing(j) {
                return ColumnSchema {
                    name,
                    kind: ColumnKind::Numerical,
                    categories: Vec::new(),
                    all_missing: true,
                };
            }
            let mut seen = BTreeMap::new();
            let mut categories = Vec::new();
            let mut numeric = true;
            for cell in table.column(j).iter().flatten() {
                numeric &= parse_finite(cell).is_some();
                if !seen.contains_key(cell.as_str()) {
                    seen.insert(cell.as_str(), ());
                    categories.push(cell.clone());
                }
            }
            if !numeric || categories.len() <= max_categorical_cardinality {
                ColumnSchema { name, kind: ColumnKind::Categorical, categories, all_missing: false }
            } else {
                ColumnSchema { name, kind: ColumnKind::Numerical, categories: Vec::new(), all_missing: false }
            }
        })
        .collect()
}

/// Backward-difference contrast matrix for `k` ordered levels, shape `k × (k−1)`.
///
/// Column `j` (1-based) holds `−(k−j)/k` for levels `1..=j` and `j/k` for
/// levels `j+1..=k`, so regressing on these columns plus an intercept yields
/// coefficients equal to differences of adjacent level means.
pub fn backward_difference_contrast(k: usize) -> Matrix {
    let cols = k.saturating_sub(1);
    let mut m = Matrix::zeros(k, cols);
    let kf = k as f64;
    for j in 1..=cols {
        for level in 1..=k {
            let v = if level <= j { -((k - j) as f64) / kf } else { j as f64 / kf };
            m.set(level - 1, j - 1, v);
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FittedColumn {
    Numerical {
        name: String,
        impute: f64,
    },
    Categorical {
        name: String,
        levels: Vec<String>,
        /// Index into `levels` of the modal category.
        mode: usize,
        /// `levels.len() × (levels.len() − 1)` backward-difference contrasts.
        contrast: Matrix,
    },
}

impl FittedColumn {
    pub fn name(&self) -> &str {
        match self {
            FittedColumn::Numerical { name, .. } | FittedColumn::Categorical { name, .. } => name,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            FittedColumn::Numerical { .. } => 1,
            FittedColumn::Categorical { contrast, .. } => contrast.cols(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputColumn {
    pub name: String,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnseenCategoryPolicy {
    /// Encode as the modal category and count a warning.
    #[default]
    Modal,
    Error,
}

/// Everything learned by [`fit_preprocessor`]; serializable so that a later
/// `transform` reproduces the exact same encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessorState {
    pub schema_version: u32,
    pub dropped_columns: Vec<String>,
    pub columns: Vec<FittedColumn>,
    pub scale_min: Vec<f64>,
    pub scale_max: Vec<f64>,
    pub output_layout: Vec<OutputColumn>,
    /// Label values in class-index order. Empty when fitted without labels.
    pub label_classes: Vec<String>,
}

impl PreprocessorState {
    pub fn n_outputs(&self) -> usize {
        self.output_layout.len()
    }
}

/// Row-major feature matrix with optional (possibly partial) integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TableDataset {
    pub x: Matrix,
    /// Class index per row; `None` marks an unlabeled row.
    pub y: Option<Vec<Option<usize>>>,
    pub n_classes: usize,
    pub feature_names: Vec<String>,
    /// Stable identifiers carried through splits and concatenation.
    pub row_ids: Vec<u64>,
}

impl TableDataset {
    pub fn new(x: Matrix, y: Option<Vec<Option<usize>>>, n_classes: usize) -> Self {
        let feature_names = (0..x.cols()).map(|j| format!("f{j}")).collect();
        let row_ids = (0..x.rows() as u64).collect();
        Self { x, y, n_classes, feature_names, row_ids }
    }

    pub fn with_labels(x: Matrix, y: &[usize], n_classes: usize) -> Self {
        Self::new(x, Some(y.iter().copied().map(Some).collect()), n_classes)
    }

    pub fn n_samples(&self) -> usize {
        self.x.rows()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.y.as_ref().and_then(|y| y[i])
    }

    pub fn n_labeled(&self) -> usize {
        self.y.as_ref().map_or(0, |y| y.iter().flatten().count())
    }

    /// Labels as a dense vector when every row is labeled.
    pub fn complete_labels(&self) -> Option<Vec<usize>> {
        self.y.as_ref()?.iter().copied().collect()
    }

    pub fn subset(&self, idx: &[usize]) -> TableDataset {
        TableDataset {
            x: self.x.select_rows(idx),
            y: self.y.as_ref().map(|y| idx.iter().map(|&i| y[i]).collect()),
            n_classes: self.n_classes,
            feature_names: self.feature_names.clone(),
            row_ids: idx.iter().map(|&i| self.row_ids[i]).collect(),
        }
    }

    /// Rows that carry a label.
    pub fn labeled_subset(&self) -> TableDataset {
        let idx: Vec<usize> = (0..self.n_samples()).filter(|&i| self.label(i).is_some()).collect();
        self.subset(&idx)
    }
}

/// Distinct label values in class-index order (numeric-aware sort).
pub fn label_classes(table: &RawTable) -> Vec<String> {
    let Some(labels) = table.labels() else {
        return Vec::new();
    };
    let mut distinct: Vec<String> = Vec::new();
    for l in labels.iter().flatten() {
        if !distinct.contains(l) {
            distinct.push(l.clone());
        }
    }
    sort_labels(distinct)
}

fn sort_labels(mut values: Vec<String>) -> Vec<String> {
    if values.iter().all(|v| parse_finite(v).is_some()) {
        values.sort_by(|a, b| {
            parse_finite(a).unwrap().partial_cmp(&parse_finite(b).unwrap()).unwrap().then(a.cmp(b))
        });
    } else {
        values.sort();
    }
    values
}

/// Fits imputation, contrast encoding and min-max statistics on `table`.
pub fn fit_preprocessor(table: &RawTable, schema: &[ColumnSchema]) -> Result<PreprocessorState, DataError> {
    if schema.len() != table.n_cols() {
        return Err(DataError::SchemaMismatch { schema: schema.len(), table: table.n_cols() });
    }
    if table.n_rows() == 0 {
        return Err(DataError::Empty);
    }
    let mut dropped_columns = Vec::new();
    let mut columns = Vec::new();
    let mut output_layout = Vec::new();

    for (j, col) in schema.iter().enumerate() {
        if col.name != table.names()[j] {
            return Err(DataError::SchemaNameMismatch {
                index: j,
                schema: col.name.clone(),
                table: table.names()[j].clone(),
            });
        }
        let cells = table.column(j);
        if col.all_missing || cells.iter().all(Option::is_none) {
            dropped_columns.push(col.name.clone());
            continue;
        }
        let fitted = match col.kind {
            ColumnKind::Numerical => {
                let mut sum = 0.0;
                let mut n = 0usize;
                for (row, cell) in cells.iter().enumerate() {
                    if let Some(s) = cell {
                        let v = parse_finite(s).ok_or_else(|| DataError::NotNumeric {
                            row,
                            column: col.name.clone(),
                            value: s.clone(),
                        })?;
                        sum += v;
                        n += 1;
                    }
                }
                FittedColumn::Numerical { name: col.name.clone(), impute: sum / n as f64 }
            }
            ColumnKind::Categorical => {
                let levels = if col.categories.is_empty() {
                    infer_schema_levels(cells)
                } else {
                    col.categories.clone()
                };
                let mut counts = vec![0usize; levels.len()];
                for (row, s) in cells.iter().enumerate().filter_map(|(r, c)| c.as_ref().map(|s| (r, s))) {
                    let l = levels.iter().position(|v| v == s).ok_or_else(|| DataError::UnseenCategory {
                        row,
                        column: col.name.clone(),
                        value: s.clone(),
                    })?;
                    counts[l] += 1;
                }
                // Strict `>` keeps the first-appearing level on ties.
                let mut mode = 0;
                for (l, &c) in counts.iter().enumerate() {
                    if c > counts[mode] {
                        mode = l;
                    }
                }
                FittedColumn::Categorical {
                    name: col.name.clone(),
                    contrast: backward_difference_contrast(levels.len()),
                    levels,
                    mode,
                }
            }
        };
        match &fitted {
            FittedColumn::Numerical { name, .. } => {
                output_layout.push(OutputColumn { name: name.clone(), source: name.clone() })
            }
            FittedColumn::Categorical { name, contrast, .. } => {
                for c in 0..contrast.cols() {
                    output_layout.push(OutputColumn { name: format!("{name}_diff{}", c + 1), source: name.clone() });
                }
            }
        }
        columns.push(fitted);
    }
    if output_layout.is_empty() {
        return Err(DataError::NoColumns);
    }

    let label_classes = label_classes(table);

    let mut state = PreprocessorState {
        schema_version: PREPROCESSOR_SCHEMA_VERSION,
        dropped_columns,
        columns,
        scale_min: Vec::new(),
        scale_max: Vec::new(),
        output_layout,
        label_classes,
    };
    let (encoded, _) = encode(table, &state, UnseenCategoryPolicy::Error)?;
    let m = encoded.cols();
    let mut lo = vec![f64::INFINITY; m];
    let mut hi = vec![f64::NEG_INFINITY; m];
    for row in encoded.iter_rows() {
        for (j, &v) in row.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    state.scale_min = lo;
    state.scale_max = hi;
    Ok(state)
}

fn infer_schema_levels(cells: &[Option<String>]) -> Vec<String> {
    let mut levels: Vec<String> = Vec::new();
    for c in cells.iter().flatten() {
        if !levels.contains(c) {
            levels.push(c.clone());
        }
    }
    levels
}

/// Imputes and contrast-encodes without scaling; returns the number of
/// unseen categories that were mapped to the mode.
fn encode(
    table: &RawTable,
    state: &PreprocessorState,
    policy: UnseenCategoryPolicy,
) -> Result<(Matrix, usize), DataError> {
    let n = table.n_rows();
    let m = state.n_outputs();
    let mut out = Matrix::zeros(n, m);
    let mut unseen = 0usize;
    let mut offset = 0;
    for col in &state.columns {
        let cells = table
            .column_by_name(col.name())
            .ok_or_else(|| DataError::MissingColumn { column: col.name().to_string() })?;
        match col {
            FittedColumn::Numerical { name, impute } => {
                for (row, cell) in cells.iter().enumerate() {
                    let v = match cell {
                        None => *impute,
                        Some(s) => parse_finite(s).ok_or_else(|| DataError::NotNumeric {
                            row,
                            column: name.clone(),
                            value: s.clone(),
                        })?,
                    };
                    out.set(row, offset, v);
                }
            }
            FittedColumn::Categorical { name, levels, mode, contrast } => {
                let lookup: BTreeMap<&str, usize> =
                    levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
                for (row, cell) in cells.iter().enumerate() {
                    let level = match cell {
                        None => *mode,
                        Some(s) => match lookup.get(s.as_str()) {
                            Some(&l) => l,
                            None => match policy {
                                UnseenCategoryPolicy::Modal => {
                                    unseen += 1;
                                    *mode
                                }
                                UnseenCategoryPolicy::Error => {
                                    return Err(DataError::UnseenCategory {
                                        row,
                                        column: name.clone(),
                                        value: s.clone(),
                                    })
                                }
                            },
                        },
                    };
                    for c in 0..contrast.cols() {
                        out.set(row, offset + c, contrast.get(level, c));
                    }
                }
            }
        }
        offset += col.width();
    }
    Ok((out, unseen))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransformReport {
    /// Cells whose category was not seen at fit time and was encoded as the mode.
    pub unseen_categories: usize,
}

/// Applies a fitted preprocessor with the default unseen-category policy.
pub fn transform(table: &RawTable, state: &PreprocessorState) -> Result<(TableDataset, TransformReport), DataError> {
    transform_with(table, state, UnseenCategoryPolicy::default())
}

pub fn transform_with(
    table: &RawTable,
    state: &PreprocessorState,
    policy: UnseenCategoryPolicy,
) -> Result<(TableDataset, TransformReport), DataError> {
    let (mut x, unseen) = encode(table, state, policy)?;
    let m = x.cols();
    for i in 0..x.rows() {
        let row = x.row_mut(i);
        for j in 0..m {
            let (lo, hi) = (state.scale_min[j], state.scale_max[j]);
            row[j] = if hi > lo { ((row[j] - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    let y = match table.labels() {
        Some(labels) if !state.label_classes.is_empty() => Some(
            labels
                .iter()
                .enumerate()
                .map(|(row, l)| match l {
                    None => Ok(None),
                    Some(v) => state
                        .label_classes
                        .iter()
                        .position(|c| c == v)
                        .map(Some)
                        .ok_or_else(|| DataError::UnknownLabel { row, value: v.clone() }),
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
        _ => None,
    };
    let n = x.rows();
    Ok((
        TableDataset {
            x,
            y,
            n_classes: state.label_classes.len(),
            feature_names: state.output_layout.iter().map(|c| c.name.clone()).collect(),
            row_ids: (0..n as u64).collect(),
        },
        TransformReport { unseen_categories: unseen },
    ))
}

/// Refits min-max scaling on `train` and applies it to every matrix in
/// `others`, clipping to `[0, 1]`. Constant columns map to 0.
pub fn minmax_rescale(train: &Matrix, others: &mut [&mut Matrix]) -> Matrix {
    let m = train.cols();
    let mut lo = vec![f64::INFINITY; m];
    let mut hi = vec![f64::NEG_INFINITY; m];
    for row in train.iter_rows() {
        for (j, &v) in row.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let apply = |x: &mut Matrix| {
        for i in 0..x.rows() {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = if hi[j] > lo[j] { ((*v - lo[j]) / (hi[j] - lo[j])).clamp(0.0, 1.0) } else { 0.0 };
            }
        }
    };
    let mut scaled = train.clone();
    apply(&mut scaled);
    for o in others.iter_mut() {
        apply(o);
    }
    scaled
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: TableDataset,
    pub val: TableDataset,
    pub test: TableDataset,
}

/// Seeded split into train/validation/test, stratified by label when labels
/// exist (unlabeled rows form their own stratum). Within each part rows keep
/// their original order.
pub fn split(dataset: &TableDataset, fractions: (f64, f64, f64), seed: u64) -> Result<Splits, DataError> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || libm::fabs(ft + fv + fs - 1.0) > 1e-9 {
        return Err(DataError::BadFractions(ft, fv, fs));
    }
    let mut strata: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for i in 0..dataset.n_samples() {
        strata.entry(dataset.label(i)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (class, mut idx) in strata {
        let n = idx.len();
        if n < 3 {
            return Err(DataError::ClassTooSmall {
                class: class.map_or_else(|| "<unlabeled>".to_string(), |c| c.to_string()),
                count: n,
                splits: 3,
            });
        }
        idx.shuffle(&mut rng);
        let n_train = (libm::round(n as f64 * ft) as usize).clamp(1, n - 2);
        let n_val = (libm::round(n as f64 * fv) as usize).clamp(1, n - n_train - 1);
        tr.extend_from_slice(&idx[..n_train]);
        va.extend_from_slice(&idx[n_train..n_train + n_val]);
        te.extend_from_slice(&idx[n_train + n_val..]);
    }
    tr.sort_unstable();
    va.sort_unstable();
    te.sort_unstable();
    Ok(Splits { train: dataset.subset(&tr), val: dataset.subset(&va), test: dataset.subset(&te) })
}

/// Train/validation/test parts of a raw table with the source row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSplits {
    pub train: RawTable,
    pub val: RawTable,
    pub test: RawTable,
    pub indices: [Vec<usize>; 3],
}

/// [`split`] applied to raw rows, so preprocessing can be fitted on the
/// training part only.
pub fn split_raw(table: &RawTable, fractions: (f64, f64, f64), seed: u64) -> Result<RawSplits, DataError> {
    let classes = label_classes(table);
    let y = table.labels().map(|l| {
        l.iter().map(|v| v.as_ref().and_then(|v| classes.iter().position(|c| c == v))).collect()
    });
    let index = TableDataset::new(Matrix::zeros(table.n_rows(), 0), y, classes.len());
    let s = split(&index, fractions, seed)?;
    let ids = |d: &TableDataset| d.row_ids.iter().map(|&i| i as usize).collect::<Vec<_>>();
    let indices = [ids(&s.train), ids(&s.val), ids(&s.test)];
    Ok(RawSplits {
        train: table.select_rows(&indices[0]),
        val: table.select_rows(&indices[1]),
        test: table.select_rows(&indices[2]),
        indices,
    })
}
