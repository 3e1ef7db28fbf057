//! CSV ingestion and processed-dataset files.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use recontab_core::data::{RawTable, TableDataset};
use recontab_core::linalg::Matrix;
use thiserror::Error;

/// Cell values treated as missing unless overridden.
pub const DEFAULT_MISSING_TOKENS: [&str; 3] = ["", "NA", "?"];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot open `{path}`: {source}")]
    Open { path: PathBuf, source: std::io::Error },
    #[error("cannot write `{path}`: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("malformed CSV near line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("CSV has no header row")]
    NoHeader,
    #[error("data row {row} (line {line}) has {found} fields, expected {expected}")]
    RaggedRow { row: usize, line: u64, found: usize, expected: usize },
    #[error("label column `{0}` is not in the header")]
    MissingLabelColumn(String),
    #[error("column `{0}` appears more than once in the header")]
    DuplicateColumn(String),
    #[error("data row {row}, column `{column}`: `{value}` is not a number")]
    NotNumeric { row: usize, column: String, value: String },
    #[error("{0}")]
    Format(String),
}

impl From<csv::Error> for IoError {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map_or(0, |p| p.line());
        IoError::Csv { line, message: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvOptions {
    pub label_column: Option<String>,
    pub missing_tokens: Vec<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self { label_column: None, missing_tokens: DEFAULT_MISSING_TOKENS.iter().map(|s| s.to_string()).collect() }
    }
}

impl CsvOptions {
    pub fn with_label(label: Option<&str>) -> Self {
        Self { label_column: label.map(str::to_string), ..Self::default() }
    }
}

pub fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|source| IoError::Open { path: path.to_path_buf(), source })
}

pub fn create(path: &Path) -> Result<File, IoError> {
    File::create(path).map_err(|source| IoError::Write { path: path.to_path_buf(), source })
}

/// Reads a headed, RFC-4180 CSV file into a raw table.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<RawTable, IoError> {
    read_csv(open(path)?, opts)
}

pub fn read_csv<R: Read>(reader: R, opts: &CsvOptions) -> Result<RawTable, IoError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(IoError::NoHeader);
    }
    for (i, h) in header.iter().enumerate() {
        if header[..i].contains(h) {
            return Err(IoError::DuplicateColumn(h.clone()));
        }
    }
    let label_idx = match &opts.label_column {
        Some(l) => Some(header.iter().position(|h| h == l).ok_or_else(|| IoError::MissingLabelColumn(l.clone()))?),
        None => None,
    };
    let feature_idx: Vec<usize> = (0..header.len()).filter(|j| Some(*j) != label_idx).collect();
    let mut columns: Vec<Vec<Option<String>>> = vec![Vec::new(); feature_idx.len()];
    let mut labels: Vec<Option<String>> = Vec::new();
    let cell = |v: &str| (!opts.missing_tokens.iter().any(|t| t == v)).then(|| v.to_string());
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            let line = rec.position().map_or(0, |p| p.line());
            return Err(IoError::RaggedRow { row, line, found: rec.len(), expected: header.len() });
        }
        for (c, &j) in feature_idx.iter().enumerate() {
            columns[c].push(cell(&rec[j]));
        }
        if let Some(l) = label_idx {
            labels.push(cell(&rec[l]));
        }
    }
    let names = feature_idx.iter().map(|&j| header[j].clone()).collect();
    Ok(RawTable::new(names, columns, label_idx.map(|_| labels)))
}

/// Name of the label column in processed dataset files.
pub const LABEL_COLUMN: &str = "label";
pub const ROW_ID_COLUMN: &str = "row_id";

/// Writes `row_id, <features>, label` with exact (round-trip) floats; an
/// empty label cell marks an unlabeled row.
pub fn write_dataset(path: &Path, data: &TableDataset) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec![ROW_ID_COLUMN.to_string()];
    header.extend(data.feature_names.iter().cloned());
    header.push(LABEL_COLUMN.to_string());
    w.write_record(&header)?;
    for i in 0..data.n_samples() {
        let mut rec = vec![data.row_ids[i].to_string()];
        rec.extend(data.x.row(i).iter().map(|v| format!("{v:?}")));
        rec.push(data.label(i).map_or_else(String::new, |y| y.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| IoError::Write { path: path.to_path_buf(), source })
}

/// Reads a file produced by [`write_dataset`]. `n_classes` defaults to one
/// more than the largest label present. A file without any label reads as
/// an unlabeled dataset.
pub fn read_dataset(path: &Path, n_classes: Option<usize>) -> Result<TableDataset, IoError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(open(path)?);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some(ROW_ID_COLUMN) || header.last().map(String::as_str) != Some(LABEL_COLUMN) {
        return Err(IoError::Format(format!(
            "`{}` is not a processed dataset (expected `{ROW_ID_COLUMN}` first and `{LABEL_COLUMN}` last)",
            path.display()
        )));
    }
    let m = header.len() - 2;
    let mut values = Vec::new();
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut any_label = false;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |j: usize| -> Result<f64, IoError> {
            rec[j].trim().parse::<f64>().map_err(|_| IoError::NotNumeric { row, column: header[j].clone(), value: rec[j].to_string() })
        };
        ids.push(rec[0].trim().parse::<u64>().map_err(|_| IoError::NotNumeric {
            row,
            column: ROW_ID_COLUMN.into(),
            value: rec[0].to_string(),
        })?);
        for j in 1..=m {
            values.push(num(j)?);
        }
        let l = rec[m + 1].trim();
        labels.push(if l.is_empty() {
            None
        } else {
            any_label = true;
            Some(l.parse::<usize>().map_err(|_| IoError::NotNumeric { row, column: LABEL_COLUMN.into(), value: l.into() })?)
        });
    }
    let n = ids.len();
    let k = n_classes.unwrap_or_else(|| labels.iter().flatten().max().map_or(0, |m| m + 1));
    let mut ds = TableDataset::new(Matrix::from_vec(n, m, values), any_label.then_some(labels), k);
    ds.feature_names = header[1..=m].to_vec();
    ds.row_ids = ids;
    Ok(ds)
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory, so readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let err = |source| IoError::Write { path: path.to_path_buf(), source };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(err)?;
    tmp.write_all(contents).map_err(err)?;
    tmp.persist(path).map_err(|e| err(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_labels_and_missing_tokens() {
        let csv = "a,b,label\n1,x,yes\nNA,\"y,z\",no\n?,,yes\n";
        let t = read_csv(csv.as_bytes(), &CsvOptions::with_label(Some("label"))).unwrap();
        assert_eq!(t.n_cols(), 2);
        assert_eq!(t.n_rows(), 3);
        assert_eq!(t.column(0), &[Some("1".to_string()), None, None]);
        assert_eq!(t.column(1)[1].as_deref(), Some("y,z"));
        assert_eq!(t.labels().unwrap().len(), 3);
    }

    #[test]
    fn all_missing_column_is_kept() {
        let t = read_csv("a,c\n1,\n2,NA\n".as_bytes(), &CsvOptions::default()).unwrap();
        assert!(t.is_all_missing(1));
    }

    #[test]
    fn errors_carry_coordinates() {
        match read_csv("a,b\n1,2\n3\n".as_bytes(), &CsvOptions::default()) {
            Err(IoError::RaggedRow { row: 1, line: 3, found: 1, expected: 2 }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_csv("a,b\n1,2\n".as_bytes(), &CsvOptions::with_label(Some("y"))),
            Err(IoError::MissingLabelColumn(_))
        ));
        assert!(matches!(read_csv("a,a\n1,2\n".as_bytes(), &CsvOptions::default()), Err(IoError::DuplicateColumn(_))));
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let mut d = TableDataset::new(
            Matrix::from_rows(&[vec![0.1 + 0.2, 1.0 / 3.0], vec![0.0, 1e-300]]),
            Some(vec![Some(1), None]),
            3,
        );
        d.row_ids = vec![7, 9];
        write_dataset(&p, &d).unwrap();
        let back = read_dataset(&p, Some(3)).unwrap();
        assert_eq!(back, TableDataset { feature_names: d.feature_names.clone(), ..d.clone() });
        assert_eq!(read_dataset(&p, None).unwrap().n_classes, 2);
    }
}
