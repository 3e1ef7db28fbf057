//! Metrics, embedding export, the plug-and-play feature pipeline, an
//! in-repo multinomial logistic regression, external baseline adapters and
//! the corruption-ratio ablation runner.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{minmax_rescale, Splits, TableDataset};
use crate::linalg::{dot, Matrix};
use crate::losses::softmax;
use crate::model::{l2_normalize, ModelError, ModelParameters};
use crate::training::{finetune, pretrain_semi, FinetuneConfig, TrainConfig, TrainError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("row ids do not line up at position {position}")]
    MisalignedRows { position: usize },
    #[error("dataset has {data} features but the checkpoint expects {model}")]
    FeatureMismatch { data: usize, model: usize },
    #[error("labels are required")]
    Unlabeled,
    #[error("adapter `{name}` failed: {reason}")]
    Adapter { name: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Area under the ROC curve via the Mann–Whitney statistic with half credit
/// for ties, computed from average ranks in `O(n log n)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::UndefinedMetric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("NaN filtered"));
    // Twice the rank sum keeps tie-averaged ranks integral.
    let mut rank2_sum_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 averaged, doubled: (i + 1) + (j + 1).
        let rank2 = (i + j + 2) as u128;
        for &k in &order[i..=j] {
            if labels[k] {
                rank2_sum_pos += rank2;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    // 2U = 2·R₊ − n₊(n₊+1)
    let u2 = rank2_sum_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Index of the largest entry of each row (first one on ties).
pub fn argmax_rows(p: &Matrix) -> Vec<usize> {
    p.iter_rows()
        .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc }).0)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Auroc,
    Accuracy,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Auroc => "auroc",
            MetricName::Accuracy => "accuracy",
        }
    }
}

/// AUROC for binary tasks, accuracy otherwise.
pub fn metric_for(n_classes: usize) -> MetricName {
    if n_classes == 2 {
        MetricName::Auroc
    } else {
        MetricName::Accuracy
    }
}

/// Scores a probability matrix against labels with [`metric_for`].
pub fn score_probabilities(proba: &Matrix, labels: &[usize], n_classes: usize) -> Result<(MetricName, f64), EvalError> {
    if proba.rows() != labels.len() {
        return Err(EvalError::LengthMismatch(proba.rows(), labels.len()));
    }
    let metric = metric_for(n_classes);
    let value = match metric {
        MetricName::Auroc => {
            let scores = proba.column(1);
            let truth: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
            auroc(&scores, &truth)?
        }
        MetricName::Accuracy => accuracy(&argmax_rows(proba), labels)?,
    };
    Ok((metric, value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Original columns only.
    Raw,
    /// Exported embedding only.
    Distilled,
    /// Original columns followed by the embedding.
    Concat,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 3] = [FeatureMode::Raw, FeatureMode::Distilled, FeatureMode::Concat];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Raw => "raw",
            FeatureMode::Distilled => "distilled",
            FeatureMode::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub method: String,
    pub feature_mode: FeatureMode,
    pub metric: MetricName,
    pub value: f64,
    pub n_test: usize,
    /// Set when the producer hit an iteration cap or similar soft failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// L2-normalized embeddings of a dataset under a frozen checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub z: Matrix,
    /// Fingerprint of the parameters that produced `z`.
    pub source_checkpoint: String,
    pub row_ids: Vec<u64>,
}

impl EmbeddingBatch {
    /// A zero-width batch; concatenating it is the identity.
    pub fn empty(row_ids: Vec<u64>) -> Self {
        Self { z: Matrix::zeros(row_ids.len(), 0), source_checkpoint: String::new(), row_ids }
    }
}

pub fn embed_dataset(params: &ModelParameters, data: &TableDataset) -> Result<EmbeddingBatch, EvalError> {
    let c = params.config();
    if c.n_features != data.n_features() {
        return Err(EvalError::FeatureMismatch { data: data.n_features(), model: c.n_features });
    }
    let mut z = Matrix::zeros(data.n_samples(), c.z_dim);
    for i in 0..data.n_samples() {
        let (n, _) = l2_normalize(&params.encode(data.x.row(i))?);
        z.row_mut(i).copy_from_slice(&n);
    }
    Ok(EmbeddingBatch { z, source_checkpoint: params.fingerprint(), row_ids: data.row_ids.clone() })
}

/// `[x | z]`, with labels and row ids carried through.
pub fn concat_features(data: &TableDataset, emb: &EmbeddingBatch) -> Result<TableDataset, EvalError> {
    if emb.row_ids.len() != data.row_ids.len() {
        return Err(EvalError::LengthMismatch(data.row_ids.len(), emb.row_ids.len()));
    }
    if let Some(position) = data.row_ids.iter().zip(&emb.row_ids).position(|(a, b)| a != b) {
        return Err(EvalError::MisalignedRows { position });
    }
    let mut out = data.clone();
    out.x = data.x.hconcat(&emb.z);
    out.feature_names.extend((0..emb.z.cols()).map(|k| format!("z_{k}")));
    Ok(out)
}

/// Features for one mode: raw, embedding only, or both.
pub fn features_for_mode(data: &TableDataset, emb: &EmbeddingBatch, mode: FeatureMode) -> Result<TableDataset, EvalError> {
    match mode {
        FeatureMode::Raw => Ok(data.clone()),
        FeatureMode::Concat => concat_features(data, emb),
        FeatureMode::Distilled => {
            let mut out = concat_features(data, emb)?;
            out.x = emb.z.clone();
            out.feature_names = (0..emb.z.cols()).map(|k| format!("z_{k}")).collect();
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    /// Weight of `½‖W‖²` added to the mean cross-entropy (intercept unpenalized).
    pub l2: f64,
    pub fit_intercept: bool,
    pub max_iter: usize,
    /// Stop when the gradient's max-abs entry falls below this.
    pub tolerance: f64,
    /// Number of correction pairs kept by L-BFGS.
    pub history: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self { l2: 1e-4, fit_intercept: true, max_iter: 1000, tolerance: 1e-6, history: 10 }
    }
}

/// Multinomial logistic model `softmax(xW + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    /// `d × K` coefficients.
    pub weights: Matrix,
    pub intercept: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

impl LogisticModel {
    pub fn predict_proba(&self, x: &Matrix) -> Matrix {
        let k = self.intercept.len();
        let mut out = Matrix::zeros(x.rows(), k);
        let mut logits = vec![0.0; k];
        for i in 0..x.rows() {
            logits_into(x.row(i), &self.weights, &self.intercept, &mut logits);
            out.row_mut(i).copy_from_slice(&softmax(&logits));
        }
        out
    }
}

fn logits_into(x: &[f64], w: &Matrix, b: &[f64], out: &mut [f64]) {
    out.copy_from_slice(b);
    for (xi, wrow) in x.iter().zip(w.iter_rows()) {
        if *xi != 0.0 {
            for (o, wv) in out.iter_mut().zip(wrow) {
                *o += xi * wv;
            }
        }
    }
}

struct LogisticProblem<'a> {
    x: &'a Matrix,
    y: &'a [usize],
    k: usize,
    cfg: LogisticConfig,
}

impl LogisticProblem<'_> {
    fn dim(&self) -> usize {
        (self.x.cols() + 1) * self.k
    }

    /// Parameters: `W` row-major (`d × K`), then `b` (`K`).
    fn value_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (n, d, k) = (self.x.rows(), self.x.cols(), self.k);
        let (w, b) = theta.split_at(d * k);
        let w = Matrix::from_vec(d, k, w.to_vec());
        grad.iter_mut().for_each(|g| *g = 0.0);
        let inv = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut logits = vec![0.0; k];
        for i in 0..n {
            let xi = self.x.row(i);
            logits_into(xi, &w, b, &mut logits);
            let (l, dl) = crate::losses::cross_entropy_grad(&logits, self.y[i]);
            loss += l * inv;
            for (j, &xv) in xi.iter().enumerate() {
                if xv != 0.0 {
                    for c in 0..k {
                        grad[j * k + c] += xv * dl[c] * inv;
                    }
                }
            }
            if self.cfg.fit_intercept {
                for c in 0..k {
                    grad[d * k + c] += dl[c] * inv;
                }
            }
        }
        let wv = &theta[..d * k];
        loss += 0.5 * self.cfg.l2 * dot(wv, wv);
        for (g, v) in grad[..d * k].iter_mut().zip(wv) {
            *g += self.cfg.l2 * v;
        }
        loss
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(libm::fabs(*x)))
}

/// Minimizes a smooth function with L-BFGS and a backtracking Armijo search.
/// Returns `(theta, iterations, final gradient max-abs, converged)`.
fn lbfgs<F>(mut f: F, mut theta: Vec<f64>, history: usize, tol: f64, max_iter: usize) -> (Vec<f64>, usize, f64, bool)
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let dim = theta.len();
    let mut grad = vec![0.0; dim];
    let mut fx = f(&theta, &mut grad);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut new_grad = vec![0.0; dim];
    let mut trial = vec![0.0; dim];
    for iter in 0..max_iter {
        let gnorm = max_abs(&grad);
        if gnorm < tol {
            return (theta, iter, gnorm, true);
        }
        // Two-loop recursion for the search direction.
        let mut q = grad.clone();
        let mut alphas = vec![0.0; s_hist.len()];
        for h in (0..s_hist.len()).rev() {
            let rho = 1.0 / dot(&y_hist[h], &s_hist[h]);
            alphas[h] = rho * dot(&s_hist[h], &q);
            for (qv, yv) in q.iter_mut().zip(&y_hist[h]) {
                *qv -= alphas[h] * yv;
            }
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let scale = 1.0 / libm::sqrt(dot(&grad, &grad)).max(1.0);
            q.iter_mut().for_each(|v| *v *= scale);
        }
        for h in 0..s_hist.len() {
            let rho = 1.0 / dot(&y_hist[h], &s_hist[h]);
            let beta = rho * dot(&y_hist[h], &q);
            for (qv, sv) in q.iter_mut().zip(&s_hist[h]) {
                *qv += (alphas[h] - beta) * sv;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&grad, &dir);
        if !(slope < 0.0) {
            // Not a descent direction: restart from steepest descent.
            s_hist.clear();
            y_hist.clear();
            dir = grad.iter().map(|g| -g).collect();
            slope = -dot(&grad, &grad);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for ((t, th), dv) in trial.iter_mut().zip(&theta).zip(&dir) {
                *t = th + step * dv;
            }
            let ft = f(&trial, &mut new_grad);
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = true;
                fx = ft;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return (theta, iter, gnorm, false);
        }
        let s: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        theta.copy_from_slice(&trial);
        grad.copy_from_slice(&new_grad);
        if dot(&s, &y) > 1e-12 * libm::sqrt(dot(&s, &s) * dot(&y, &y)) {
            if s_hist.len() == history.max(1) {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
    }
    let gnorm = max_abs(&grad);
    (theta, max_iter, gnorm, gnorm < tol)
}

/// Fits L2-regularized multinomial logistic regression from a zero start.
pub fn fit_logistic(x: &Matrix, y: &[usize], n_classes: usize, cfg: &LogisticConfig) -> Result<LogisticModel, EvalError> {
    if x.rows() != y.len() {
        return Err(EvalError::LengthMismatch(x.rows(), y.len()));
    }
    if y.is_empty() {
        return Err(EvalError::Empty);
    }
    let k = n_classes.max(2);
    if let Some(&bad) = y.iter().find(|&&v| v >= k) {
        return Err(EvalError::UndefinedMetric(format!("label {bad} outside {k} classes")));
    }
    let prob = LogisticProblem { x, y, k, cfg: *cfg };
    let (theta, iterations, gradient_norm, converged) =
        lbfgs(|t, g| prob.value_grad(t, g), vec![0.0; prob.dim()], cfg.history, cfg.tolerance, cfg.max_iter);
    let d = x.cols();
    Ok(LogisticModel {
        weights: Matrix::from_vec(d, k, theta[..d * k].to_vec()),
        intercept: theta[d * k..].to_vec(),
        iterations,
        gradient_norm,
        converged,
    })
}

/// Everything a report needs besides the metric itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportContext<'a> {
    pub dataset: &'a str,
    pub method: &'a str,
    pub feature_mode: FeatureMode,
}

fn labels_of(d: &TableDataset) -> Result<Vec<usize>, EvalError> {
    d.complete_labels().ok_or(EvalError::Unlabeled)
}

/// Builds a report from per-class test probabilities.
pub fn report_from_scores(
    ctx: &ReportContext<'_>,
    proba: &Matrix,
    test: &TableDataset,
    warning: Option<String>,
) -> Result<MetricReport, EvalError> {
    let y = labels_of(test)?;
    if y.is_empty() {
        return Err(EvalError::Empty);
    }
    let (metric, value) = score_probabilities(proba, &y, test.n_classes)?;
    Ok(MetricReport {
        dataset: ctx.dataset.to_string(),
        method: ctx.method.to_string(),
        feature_mode: ctx.feature_mode,
        metric,
        value,
        n_test: y.len(),
        warning,
    })
}

/// Fits on `train` and reports AUROC (binary) or accuracy on `test`.
pub fn logistic_regression(
    train: &TableDataset,
    test: &TableDataset,
    cfg: &LogisticConfig,
    ctx: &ReportContext<'_>,
) -> Result<MetricReport, EvalError> {
    let y = labels_of(train)?;
    let model = fit_logistic(&train.x, &y, train.n_classes, cfg)?;
    let warning = (!model.converged).then(|| {
        format!("did not reach tolerance {} in {} iterations (gradient {:.3e})", cfg.tolerance, model.iterations, model.gradient_norm)
    });
    report_from_scores(ctx, &model.predict_proba(&test.x), test, warning)
}

/// Narrow fit/predict-proba contract for classifiers living outside the crate.
pub trait BaselineAdapter {
    fn name(&self) -> &str;
    /// Returns one probability column per class for every test row.
    fn fit_predict_proba(&self, train: &TableDataset, test: &TableDataset) -> Result<Matrix, EvalError>;
}

/// The in-repo logistic regression behind the adapter interface.
#[derive(Debug, Clone, Default)]
pub struct LogisticAdapter {
    pub config: LogisticConfig,
}

impl BaselineAdapter for LogisticAdapter {
    fn name(&self) -> &str {
        "logistic"
    }

    fn fit_predict_proba(&self, train: &TableDataset, test: &TableDataset) -> Result<Matrix, EvalError> {
        let model = fit_logistic(&train.x, &labels_of(train)?, train.n_classes, &self.config)?;
        Ok(model.predict_proba(&test.x))
    }
}

#[derive(Default)]
pub struct AdapterRegistry {
    adapters: Vec<Box<dyn BaselineAdapter>>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an adapter; a later one with the same name shadows earlier ones.
    pub fn register(&mut self, adapter: Box<dyn BaselineAdapter>) {
        self.adapters.push(adapter);
    }

    pub fn get(&self, name: &str) -> Option<&dyn BaselineAdapter> {
        self.adapters.iter().rev().find(|a| a.name() == name).map(|a| a.as_ref())
    }

    pub fn names(&self) -> Vec<String> {
        self.adapters.iter().map(|a| a.name().to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BaselineOutcome {
    Report(MetricReport),
    Skipped { dataset: String, method: String, feature_mode: FeatureMode, reason: String },
}

/// Runs a registered adapter. Missing or failing adapters yield a skip record
/// instead of an error.
pub fn baseline_adapter(
    registry: &AdapterRegistry,
    name: &str,
    train: &TableDataset,
    test: &TableDataset,
    dataset: &str,
    feature_mode: FeatureMode,
) -> BaselineOutcome {
    let skip = |reason: String| BaselineOutcome::Skipped {
        dataset: dataset.to_string(),
        method: name.to_string(),
        feature_mode,
        reason,
    };
    let Some(adapter) = registry.get(name) else {
        return skip("adapter not registered".to_string());
    };
    let ctx = ReportContext { dataset, method: name, feature_mode };
    match adapter.fit_predict_proba(train, test).and_then(|p| {
        if p.shape() != (test.n_samples(), test.n_classes.max(2)) {
            return Err(EvalError::Adapter {
                name: name.to_string(),
                reason: format!("returned scores of shape {:?}", p.shape()),
            });
        }
        report_from_scores(&ctx, &p, test, None)
    }) {
        Ok(r) => BaselineOutcome::Report(r),
        Err(e) => skip(e.to_string()),
    }
}

/// Builds train/test features for `mode` from a frozen checkpoint. For
/// concatenated features min-max scaling is refit on the training matrix.
pub fn plug_and_play_features(
    params: &ModelParameters,
    train: &TableDataset,
    test: &TableDataset,
    mode: FeatureMode,
) -> Result<(TableDataset, TableDataset), EvalError> {
    if mode == FeatureMode::Raw {
        return Ok((train.clone(), test.clone()));
    }
    let mut tr = features_for_mode(train, &embed_dataset(params, train)?, mode)?;
    let mut te = features_for_mode(test, &embed_dataset(params, test)?, mode)?;
    if mode == FeatureMode::Concat {
        tr.x = minmax_rescale(&tr.x, &mut [&mut te.x]);
    }
    Ok((tr, te))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMetric {
    /// Fine-tune end to end and score the head on the test split.
    Finetune,
    /// Logistic regression on concatenated features.
    PlugAndPlay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub template: TrainConfig,
    pub finetune: FinetuneConfig,
    pub metric: AblationMetric,
    pub logistic: LogisticConfig,
    /// Scores on the validation split instead of the test split.
    pub use_validation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub dataset: String,
    pub metric: MetricName,
    pub values: Vec<f64>,
    /// Index of the first maximum of `values`.
    pub best: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub ratios: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

/// Index of the first maximum.
pub fn best_index(values: &[f64]) -> usize {
    values.iter().enumerate().fold(0, |b, (i, v)| if *v > values[b] { i } else { b })
}

/// Scores one pretrained checkpoint under the ablation protocol.
pub fn ablation_cell(params: &ModelParameters, splits: &Splits, cfg: &AblationConfig) -> Result<MetricReport, EvalError> {
    let eval = if cfg.use_validation { &splits.val } else { &splits.test };
    let ctx = ReportContext { dataset: "", method: "recontab", feature_mode: FeatureMode::Raw };
    match cfg.metric {
        AblationMetric::Finetune => {
            let model = finetune(params, &splits.train.labeled_subset(), &cfg.finetune)?;
            let eval = eval.labeled_subset();
            report_from_scores(&ctx, &model.predict_proba(&eval.x)?, &eval, None)
        }
        AblationMetric::PlugAndPlay => {
            let (tr, te) = plug_and_play_features(params, &splits.train.labeled_subset(), &eval.labeled_subset(), FeatureMode::Concat)?;
            logistic_regression(&tr, &te, &cfg.logistic, &ReportContext { feature_mode: FeatureMode::Concat, ..ctx })
        }
    }
}

/// For every dataset and ratio: semi-supervised pretraining at that ratio,
/// then scoring per [`AblationConfig::metric`]. `on_cell` sees each result.
pub fn ablation_runner<F>(
    datasets: &[(&str, &Splits)],
    ratios: &[f64],
    cfg: &AblationConfig,
    mut on_cell: F,
) -> Result<AblationTable, EvalError>
where
    F: FnMut(&str, f64, &MetricReport),
{
    if let Some(&r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(EvalError::Train(TrainError::InvalidConfig(format!("corruption ratio {r} outside [0, 1]"))));
    }
    if ratios.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut rows = Vec::with_capacity(datasets.len());
    for (name, splits) in datasets {
        let mut values = Vec::with_capacity(ratios.len());
        let mut metric = metric_for(splits.train.n_classes);
        for &ratio in ratios {
            let tc = TrainConfig { corruption_ratio: ratio, ..cfg.template };
            let out = pretrain_semi(&splits.train, tc)?;
            let mut report = ablation_cell(&out.state.params, splits, cfg)?;
            report.dataset = name.to_string();
            on_cell(name, ratio, &report);
            metric = report.metric;
            values.push(report.value);
        }
        let best = best_index(&values);
        rows.push(AblationRow { dataset: name.to_string(), metric, values, best });
    }
    Ok(AblationTable { ratios: ratios.to_vec(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auroc(s: &[f64], y: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] && !y[j] {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_examples() {
        let y = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &y).unwrap(), 0.75);
        assert_eq!(auroc(&[0.0, 0.1, 0.5, 0.9], &y).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &y).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(EvalError::UndefinedMetric(_))));
        assert!(matches!(auroc(&[0.1], &[true, false]), Err(EvalError::LengthMismatch(1, 2))));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 1], &[0, 1, 1, 0]).unwrap(), 0.75);
        assert_eq!(accuracy(&[], &[]), Err(EvalError::Empty));
    }

    proptest! {
        #[test]
        fn auroc_matches_pairs_and_invariances(
            pairs in proptest::collection::vec((0u8..12, any::<bool>()), 2..60),
        ) {
            let s: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 4.0).collect();
            let y: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(y.iter().any(|v| *v) && y.iter().any(|v| !*v));
            let a = auroc(&s, &y).unwrap();
            prop_assert!((a - brute_auroc(&s, &y)).abs() < 1e-12);
            let t: Vec<f64> = s.iter().map(|v| libm::exp(3.0 * v) - 7.0).collect();
            prop_assert_eq!(auroc(&t, &y).unwrap(), a);
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let distinct = {
                let mut u = s.clone();
                u.sort_by(|a, b| a.partial_cmp(b).unwrap());
                u.windows(2).all(|w| w[0] != w[1])
            };
            if distinct {
                prop_assert!((auroc(&neg, &y).unwrap() + a - 1.0).abs() < 1e-12);
            }
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn concat_and_modes() {
        let d = TableDataset::with_labels(Matrix::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]), &[0, 1], 2);
        let emb = EmbeddingBatch { z: Matrix::from_rows(&[vec![1.0], vec![-1.0]]), source_checkpoint: "x".into(), row_ids: vec![0, 1] };
        let c = concat_features(&d, &emb).unwrap();
        assert_eq!(c.x.shape(), (2, 3));
        assert_eq!(c.y, d.y);
        assert_eq!(&c.x.row(1)[..2], d.x.row(1));
        let e = concat_features(&d, &EmbeddingBatch::empty(vec![0, 1])).unwrap();
        assert_eq!(e.x, d.x);
        let bad = EmbeddingBatch { row_ids: vec![1, 0], ..emb.clone() };
        assert_eq!(concat_features(&d, &bad), Err(EvalError::MisalignedRows { position: 0 }));
        let z = features_for_mode(&d, &emb, FeatureMode::Distilled).unwrap();
        assert_eq!(z.x, emb.z);
    }

    #[test]
    fn logistic_separable_and_deterministic() {
        let x = Matrix::from_rows(&[vec![0.0, 0.1], vec![0.2, 0.0], vec![1.0, 0.9], vec![0.8, 1.0], vec![0.1, 0.3], vec![0.9, 0.7]]);
        let y = [0, 0, 1, 1, 0, 1];
        let cfg = LogisticConfig { l2: 1e-8, max_iter: 200, ..LogisticConfig::default() };
        let m = fit_logistic(&x, &y, 2, &cfg).unwrap();
        assert_eq!(argmax_rows(&m.predict_proba(&x)), y);
        assert_eq!(m, fit_logistic(&x, &y, 2, &cfg).unwrap());
    }

    #[test]
    fn logistic_converges_on_regularized_problem() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![0.5], vec![0.2], vec![0.9], vec![0.6]]);
        let y = [0, 1, 0, 1, 1, 0];
        let m = fit_logistic(&x, &y, 2, &LogisticConfig { l2: 0.1, ..LogisticConfig::default() }).unwrap();
        assert!(m.converged && m.gradient_norm < 1e-6);
    }

    struct Uniform;
    impl BaselineAdapter for Uniform {
        fn name(&self) -> &str {
            "uniform"
        }
        fn fit_predict_proba(&self, _: &TableDataset, test: &TableDataset) -> Result<Matrix, EvalError> {
            Ok(Matrix::from_vec(test.n_samples(), 2, vec![0.5; 2 * test.n_samples()]))
        }
    }

    #[test]
    fn adapters() {
        let d = TableDataset::with_labels(Matrix::from_rows(&[vec![0.0], vec![1.0], vec![0.2], vec![0.7]]), &[0, 1, 0, 1], 2);
        let mut reg = AdapterRegistry::new();
        assert!(matches!(baseline_adapter(&reg, "xgboost", &d, &d, "toy", FeatureMode::Raw), BaselineOutcome::Skipped { .. }));
        reg.register(Box::new(Uniform));
        reg.register(Box::new(LogisticAdapter::default()));
        match baseline_adapter(&reg, "uniform", &d, &d, "toy", FeatureMode::Raw) {
            BaselineOutcome::Report(r) => assert_eq!(r.value, 0.5),
            other => panic!("{other:?}"),
        }
        let direct = logistic_regression(
            &d,
            &d,
            &LogisticConfig::default(),
            &ReportContext { dataset: "toy", method: "logistic", feature_mode: FeatureMode::Raw },
        )
        .unwrap();
        assert_eq!(baseline_adapter(&reg, "logistic", &d, &d, "toy", FeatureMode::Raw), BaselineOutcome::Report(direct));
    }

    #[test]
    fn best_index_prefers_first_maximum() {
        assert_eq!(best_index(&[0.5]), 0);
        assert_eq!(best_index(&[0.1, 0.7, 0.7, 0.2]), 1);
    }
}
