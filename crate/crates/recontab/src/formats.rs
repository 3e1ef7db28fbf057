//! On-disk formats: preprocessor state, checkpoints, loss logs, embedding
//! exports and metric reports.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use recontab_core::data::{PreprocessorState, PREPROCESSOR_SCHEMA_VERSION};
use recontab_core::evaluation::{AblationTable, BaselineOutcome, EmbeddingBatch, FeatureMode, MetricReport};
use recontab_core::losses::LossReport;
use recontab_core::model::{ModelConfig, ModelParameters};
use recontab_core::training::{ChaCha8Rng, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::{create, open, write_atomic, IoError};

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>, IoError> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| IoError::Format(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    serde_json::from_reader(std::io::BufReader::new(open(path)?))
        .map_err(|e| IoError::Format(format!("`{}`: {e}", path.display())))
}

pub fn save_json<T: Serialize>(path: &Path, v: &T) -> Result<(), IoError> {
    write_atomic(path, &to_json(v)?)
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    from_json(path)
}

pub fn save_preprocessor(path: &Path, state: &PreprocessorState) -> Result<(), IoError> {
    save_json(path, state)
}

pub fn load_preprocessor(path: &Path) -> Result<PreprocessorState, IoError> {
    let raw: serde_json::Value = from_json(path)?;
    match raw.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == PREPROCESSOR_SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(IoError::Format(format!("unsupported preprocessor schema version {v}"))),
        None => return Err(IoError::Format(format!("`{}` has no schema_version", path.display()))),
    }
    serde_json::from_value(raw).map_err(|e| IoError::Format(e.to_string()))
}

/// SHA-256 of the compact JSON encoding; identifies the preprocessing a
/// checkpoint was trained under.
pub fn preprocessor_hash(state: &PreprocessorState) -> String {
    let bytes = serde_json::to_vec(state).expect("preprocessor state serializes");
    hex::encode(Sha256::digest(bytes))
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major values.
    pub data: Vec<f64>,
}

/// Optimizer and RNG state needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub epoch: u64,
    pub accumulators: Vec<f64>,
    pub data_rng: ChaCha8Rng,
    pub corruption_rng: ChaCha8Rng,
    pub train_config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    model_config: ModelConfig,
    tensors: Vec<TensorRecord>,
    preprocessor_hash: Option<String>,
    step: u64,
    #[serde(default)]
    resume: Option<ResumeState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub step: u64,
    pub preprocessor_hash: Option<String>,
    pub resume: Option<ResumeState>,
}

impl Checkpoint {
    pub fn from_params(params: ModelParameters) -> Self {
        Self { params, step: 0, preprocessor_hash: None, resume: None }
    }

    pub fn from_train_state(state: &TrainState, config: &TrainConfig, preprocessor_hash: Option<String>) -> Self {
        Self {
            params: state.params.clone(),
            step: state.step,
            preprocessor_hash,
            resume: Some(ResumeState {
                epoch: state.epoch,
                accumulators: state.accumulators.clone(),
                data_rng: state.data_rng.clone(),
                corruption_rng: state.corruption_rng.clone(),
                train_config: *config,
            }),
        }
    }

    /// The full training state, when the checkpoint carries one.
    pub fn train_state(&self) -> Option<(TrainState, TrainConfig)> {
        let r = self.resume.as_ref()?;
        Some((
            TrainState {
                params: self.params.clone(),
                accumulators: r.accumulators.clone(),
                step: self.step,
                epoch: r.epoch,
                data_rng: r.data_rng.clone(),
                corruption_rng: r.corruption_rng.clone(),
            },
            r.train_config,
        ))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, IoError> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_config: *self.params.config(),
            tensors: self
                .params
                .tensors()
                .map(|(spec, data)| TensorRecord { name: spec.name.clone(), shape: spec.shape.clone(), data: data.to_vec() })
                .collect(),
            preprocessor_hash: self.preprocessor_hash.clone(),
            step: self.step,
            resume: self.resume.clone(),
        };
        if !self.params.is_finite() {
            return Err(IoError::Format("refusing to save non-finite parameters".into()));
        }
        to_json(&file)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IoError> {
        let file: CheckpointFile = serde_json::from_slice(bytes).map_err(|e| IoError::Format(e.to_string()))?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(IoError::Format(format!("unsupported checkpoint format version {}", file.format_version)));
        }
        let params = ModelParameters::from_tensors(
            file.model_config,
            file.tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.as_slice())),
        )
        .map_err(|e| IoError::Format(e.to_string()))?;
        if let Some(r) = &file.resume {
            if r.accumulators.len() != params.values().len() {
                return Err(IoError::Format("optimizer state does not match the parameters".into()));
            }
        }
        Ok(Self { params, step: file.step, preprocessor_hash: file.preprocessor_hash, resume: file.resume })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let mut bytes = Vec::new();
        std::io::Read::read_to_end(&mut open(path)?, &mut bytes)
            .map_err(|source| IoError::Open { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            IoError::Format(m) => IoError::Format(format!("`{}`: {m}", path.display())),
            other => other,
        })
    }
}

/// Loss log column order.
pub const LOSS_LOG_HEADER: [&str; 7] =
    ["step", "reconstruction", "classification", "contrastive", "penalty", "total", "wall_clock_ms"];

/// Appends one CSV record per optimizer step.
pub struct LossLogWriter {
    inner: csv::Writer<std::fs::File>,
}

impl LossLogWriter {
    /// Creates the file with a header, or appends to it when `append` is set.
    pub fn open(path: &Path, append: bool) -> Result<Self, IoError> {
        let exists = append && path.exists();
        let file = if exists {
            std::fs::OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|source| IoError::Write { path: path.to_path_buf(), source })?
        } else {
            create(path)?
        };
        let mut inner = csv::Writer::from_writer(file);
        if !exists {
            inner.write_record(LOSS_LOG_HEADER)?;
        }
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &LossReport, wall_clock_ms: u128) -> Result<(), IoError> {
        self.inner.write_record([
            r.step.to_string(),
            format!("{:?}", r.reconstruction),
            format!("{:?}", r.classification),
            format!("{:?}", r.contrastive),
            format!("{:?}", r.penalty),
            format!("{:?}", r.total),
            wall_clock_ms.to_string(),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), IoError> {
        self.inner.flush().map_err(|e| IoError::Format(e.to_string()))
    }
}

/// Reads a loss log back (the wall-clock column is dropped).
pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>, IoError> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |j: usize| rec[j].parse::<f64>().map_err(|e| IoError::Format(format!("loss log: {e}")));
        out.push(LossReport {
            step: rec[0].parse().map_err(|e| IoError::Format(format!("loss log: {e}")))?,
            reconstruction: f(1)?,
            classification: f(2)?,
            contrastive: f(3)?,
            penalty: f(4)?,
            total: f(5)?,
        });
    }
    Ok(out)
}

/// Formats with 17 significant digits in scientific notation.
pub fn format_sig17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Header `row_id, z_0 .. z_{k-1}`; values with 17 significant digits.
pub fn write_embeddings(path: &Path, emb: &EmbeddingBatch) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["row_id".to_string()];
    header.extend((0..emb.z.cols()).map(|k| format!("z_{k}")));
    w.write_record(&header)?;
    for (id, row) in emb.row_ids.iter().zip(emb.z.iter_rows()) {
        let mut rec = vec![id.to_string()];
        rec.extend(row.iter().map(|v| format_sig17(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| IoError::Write { path: path.to_path_buf(), source })
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), IoError> {
    let mut f = std::io::BufWriter::new(create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| IoError::Format(e.to_string()))?;
        f.write_all(b"\n").map_err(|source| IoError::Write { path: path.to_path_buf(), source })?;
    }
    f.flush().map_err(|source| IoError::Write { path: path.to_path_buf(), source })
}

fn pad(s: &str, w: usize) -> String {
    format!("{s:<w$}")
}

/// Method × dataset grid, one block per feature mode. Skipped cells show `-`.
pub fn render_table1(outcomes: &[BaselineOutcome]) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for o in outcomes {
        let (d, m) = match o {
            BaselineOutcome::Report(r) => (r.dataset.as_str(), r.method.as_str()),
            BaselineOutcome::Skipped { dataset, method, .. } => (dataset.as_str(), method.as_str()),
        };
        if !datasets.contains(&d) {
            datasets.push(d);
        }
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    let find = |mode: FeatureMode, m: &str, d: &str| -> Option<&MetricReport> {
        outcomes.iter().find_map(|o| match o {
            BaselineOutcome::Report(r) if r.feature_mode == mode && r.method == m && r.dataset == d => Some(r),
            _ => None,
        })
    };
    let w0 = methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
    let wc = datasets.iter().map(|d| d.len()).max().unwrap_or(8).max(8);
    let mut out = String::new();
    for mode in FeatureMode::ALL {
        if !methods.iter().any(|m| datasets.iter().any(|d| find(mode, m, d).is_some())) {
            continue;
        }
        let _ = writeln!(out, "[features: {}]", mode.as_str());
        let mut line = pad("method", w0);
        for d in &datasets {
            line.push_str(" | ");
            line.push_str(&pad(d, wc));
        }
        let _ = writeln!(out, "{line}");
        let _ = writeln!(out, "{}", "-".repeat(line.len()));
        for m in &methods {
            let mut line = pad(m, w0);
            for d in &datasets {
                line.push_str(" | ");
                let cell = find(mode, m, d).map_or_else(|| "-".to_string(), |r| format!("{:.3}", r.value));
                line.push_str(&pad(&cell, wc));
            }
            let _ = writeln!(out, "{line}");
        }
        out.push('\n');
    }
    let skipped: Vec<String> = outcomes
        .iter()
        .filter_map(|o| match o {
            BaselineOutcome::Skipped { dataset, method, feature_mode, reason } => {
                Some(format!("{method} on {dataset} ({}): {reason}", feature_mode.as_str()))
            }
            _ => None,
        })
        .collect();
    if !skipped.is_empty() {
        let _ = writeln!(out, "skipped:");
        for s in skipped {
            let _ = writeln!(out, "  {s}");
        }
    }
    out.push_str("Baselines use identical settings in every feature mode.\n");
    out
}

/// Dataset × ratio grid; the per-row maximum is marked with `*`.
pub fn render_table2(table: &AblationTable) -> String {
    let w0 = table.rows.iter().map(|r| r.dataset.len()).max().unwrap_or(7).max(7);
    let mut out = String::new();
    let mut line = pad("dataset", w0);
    for r in &table.ratios {
        line.push_str(&format!(" | {:>7}", format!("{r:.1}")));
    }
    let _ = writeln!(out, "{line}");
    let _ = writeln!(out, "{}", "-".repeat(line.len()));
    for row in &table.rows {
        let mut line = pad(&row.dataset, w0);
        for (i, v) in row.values.iter().enumerate() {
            let mark = if i == row.best { "*" } else { " " };
            line.push_str(&format!(" | {:>6}{mark}", format!("{v:.3}")));
        }
        let _ = writeln!(out, "{line}");
    }
    if let Some(r) = table.rows.first() {
        let _ = writeln!(out, "metric: {}; * marks the best ratio per row", r.metric.as_str());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use recontab_core::evaluation::{AblationRow, MetricName};
    use recontab_core::model::ModelConfig;
    use recontab_core::training::stream_rng;

    fn params() -> ModelParameters {
        let mut p = ModelParameters::init(ModelConfig::new(5, 3), &mut stream_rng(3, 0)).unwrap();
        p.values_mut()[0] = -0.0;
        p.values_mut()[1] = 1e-310;
        p
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = params();
        let mut ck = Checkpoint::from_params(p.clone());
        ck.step = 42;
        ck.preprocessor_hash = Some("abc".into());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let x = [0.1, 0.7, 0.3, 0.0, 1.0];
        let (a, b) = (p.encode(&x).unwrap(), back.params.encode(&x).unwrap());
        assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
        assert_eq!(back.params.values()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn checkpoint_rejects_wrong_version_and_shapes() {
        let bytes = Checkpoint::from_params(params()).to_bytes().unwrap();
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        v["format_version"] = 99.into();
        assert!(Checkpoint::from_bytes(&serde_json::to_vec(&v).unwrap()).is_err());
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        v["tensors"][0]["shape"] = serde_json::json!([4]);
        assert!(Checkpoint::from_bytes(&serde_json::to_vec(&v).unwrap()).is_err());
    }

    #[test]
    fn loss_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let r = LossReport { step: 3, reconstruction: 0.1 + 0.2, classification: 1.0 / 3.0, contrastive: 0.0, penalty: 1e-17, total: 2.5 };
        {
            let mut w = LossLogWriter::open(&p, false).unwrap();
            w.write(&r, 5).unwrap();
            w.flush().unwrap();
        }
        {
            let mut w = LossLogWriter::open(&p, true).unwrap();
            w.write(&LossReport { step: 4, ..r }, 6).unwrap();
            w.flush().unwrap();
        }
        let back = read_loss_log(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].bit_eq(&r));
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,reconstruction,classification,contrastive,penalty,total,wall_clock_ms\n"));
    }

    #[test]
    fn embeddings_use_17_significant_digits() {
        assert_eq!(format_sig17(0.1), "1.0000000000000001e-1");
        let v = 0.123_456_789_012_345_67;
        assert_eq!(format_sig17(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn table2_marks_best() {
        let t = AblationTable {
            ratios: vec![0.0, 0.1],
            rows: vec![AblationRow { dataset: "syn".into(), metric: MetricName::Auroc, values: vec![0.9, 0.95], best: 1 }],
        };
        let s = render_table2(&t);
        assert!(s.contains(" 0.950*"), "{s}");
        assert!(s.contains(" 0.900 "), "{s}");
    }
}
