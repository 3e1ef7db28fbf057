//! Pretraining (self- and semi-supervised) and downstream fine-tuning.
//!
//! One pretraining step:
//!
//! 1. draw two independent mini-batches of `B` rows,
//! 2. corrupt each batch from the training marginals,
//! 3. weight, encode and decode both branches,
//! 4. reconstruction loss against the *clean* rows plus `λ‖W‖_p`,
//! 5. in semi-supervised mode also the shared-head cross-entropy and the
//!    margin contrastive loss on L2-normalized embeddings (labeled rows only),
//! 6. one RMSProp update of every parameter.
//!
//! All randomness comes from ChaCha streams derived from `TrainConfig::seed`,
//! so a run is a pure function of its dataset and config.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corruption::{corrupt, fit_marginals, CorruptionConfig, CorruptionError, CorruptionMode, EmpiricalMarginals};
use crate::data::TableDataset;
use crate::linalg::Matrix;
use crate::losses::{
    classification_loss_masked, contrastive_loss_masked, cross_entropy_grad, reconstruction_loss_grad,
    regularization_penalty, regularization_penalty_grad, LossConfig, LossError, LossReport,
};
use crate::model::{l2_normalize, l2_normalize_backward, EncoderTrace, ModelError, ModelHyper, ModelParameters};
use crate::optim::RmsProp;

/// Stream ids for the ChaCha generators derived from one seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const DATA: u64 = 1;
    pub const CORRUPTION: u64 = 2;
    pub const FINETUNE_INIT: u64 = 3;
    pub const FINETUNE_DATA: u64 = 4;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "self")]
    SelfSupervised,
    #[serde(rename = "semi")]
    SemiSupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub corruption_ratio: f64,
    #[serde(default)]
    pub corruption_mode: CorruptionMode,
    pub loss: LossConfig,
    pub mode: TrainMode,
    pub seed: u64,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    #[serde(default)]
    pub model: ModelHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 1000,
            learning_rate: 1e-4,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            corruption_ratio: 0.3,
            corruption_mode: CorruptionMode::EmpiricalMarginal,
            loss: LossConfig::default(),
            mode: TrainMode::SemiSupervised,
            seed: 0,
            checkpoint_every: 0,
            model: ModelHyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 2".into()));
        }
        if self.epochs < 1 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) || !(self.rmsprop_epsilon >= 0.0) {
            return Err(TrainError::InvalidConfig("rmsprop decay must be in [0, 1) and epsilon non-negative".into()));
        }
        self.loss.validate()?;
        self.corruption().validate()?;
        Ok(())
    }

    pub fn optimizer(&self) -> RmsProp {
        RmsProp { learning_rate: self.learning_rate, decay: self.rmsprop_decay, epsilon: self.rmsprop_epsilon }
    }

    pub fn corruption(&self) -> CorruptionConfig {
        CorruptionConfig { ratio: self.corruption_ratio, seed: self.seed, mode: self.corruption_mode }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("semi-supervised training needs a labeled dataset")]
    Unlabeled,
    #[error("dataset is empty")]
    Empty,
    #[error("dataset has {data} features but the model expects {model}")]
    FeatureMismatch { data: usize, model: usize },
    #[error("dataset has {data} classes but the head has {model}")]
    ClassMismatch { data: usize, model: usize },
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String, last_good: Box<TrainState> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainWarning {
    /// Dataset smaller than the configured batch; batches use every row.
    BatchShrunk { requested: usize, used: usize },
    /// Semi-supervised mode requested but no row carries a label.
    NoLabeledRows,
    /// Embeddings of zero norm were passed through unnormalized.
    ZeroEmbeddings { count: u64 },
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParameters,
    pub accumulators: Vec<f64>,
    pub step: u64,
    pub epoch: u64,
    pub data_rng: ChaCha8Rng,
    pub corruption_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn fresh(params: ModelParameters, seed: u64) -> Self {
        let accumulators = params.zeros_like();
        Self {
            params,
            accumulators,
            step: 0,
            epoch: 0,
            data_rng: stream_rng(seed, streams::DATA),
            corruption_rng: stream_rng(seed, streams::CORRUPTION),
        }
    }
}

/// Row indices of the two mini-batches of one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwoBatches {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
    /// True when the dataset was smaller than the requested batch size.
    pub shrunk: bool,
}

/// Two independent uniform draws of `b` rows each (without replacement
/// within a batch; the batches may overlap).
pub fn sample_two_batches<R: rand::Rng + ?Sized>(n: usize, b: usize, rng: &mut R) -> TwoBatches {
    let used = b.min(n);
    let first = index::sample(rng, n, used).into_vec();
    let second = index::sample(rng, n, used).into_vec();
    TwoBatches { first, second, shrunk: used < b }
}

/// Steps per epoch: `⌈n / B⌉` with `B` capped at `n`.
pub fn steps_per_epoch(n: usize, b: usize) -> usize {
    let b = b.min(n).max(1);
    n.div_ceil(b)
}

/// Clean and corrupted rows of both branches, with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub clean: [Matrix; 2],
    pub corrupted: [Matrix; 2],
    pub labels: [Vec<Option<usize>>; 2],
}

impl PreparedBatch {
    pub fn new(dataset: &TableDataset, batches: &TwoBatches, corrupted: [Matrix; 2]) -> Self {
        let lab = |idx: &[usize]| idx.iter().map(|&i| dataset.label(i)).collect::<Vec<_>>();
        Self {
            clean: [dataset.x.select_rows(&batches.first), dataset.x.select_rows(&batches.second)],
            corrupted,
            labels: [lab(&batches.first), lab(&batches.second)],
        }
    }
}

/// Result of one objective evaluation.
#[derive(Debug, Clone)]
pub struct Objective {
    pub report: LossReport,
    pub grads: Option<Vec<f64>>,
    /// Mean distance between similar / dissimilar labeled pairs (normalized embeddings).
    pub pair_distances: PairDistances,
    pub zero_embeddings: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PairDistances {
    pub similar_mean: Option<f64>,
    pub dissimilar_mean: Option<f64>,
}

/// Evaluates the pretraining objective (and optionally its gradient) for a
/// fixed, already corrupted batch pair.
pub fn batch_objective(
    params: &ModelParameters,
    batch: &PreparedBatch,
    loss: &LossConfig,
    mode: TrainMode,
    want_grad: bool,
) -> Result<Objective, TrainError> {
    let cfg = params.config();
    let b = batch.clean[0].rows();
    let semi = mode == TrainMode::SemiSupervised;

    let mut traces: [Vec<EncoderTrace>; 2] = [Vec::with_capacity(b), Vec::with_capacity(b)];
    let mut z = [Matrix::zeros(b, cfg.z_dim), Matrix::zeros(b, cfg.z_dim)];
    let mut xhat = [Matrix::zeros(b, cfg.n_features), Matrix::zeros(b, cfg.n_features)];
    for br in 0..2 {
        for i in 0..b {
            let (zi, tr) = params.encode_traced(batch.corrupted[br].row(i))?;
            xhat[br].row_mut(i).copy_from_slice(&params.decode(&zi));
            z[br].row_mut(i).copy_from_slice(&zi);
            if want_grad {
                traces[br].push(tr);
            }
        }
    }

    let (recon, gx1, gx2) = reconstruction_loss_grad(&batch.clean[0], &xhat[0], &batch.clean[1], &xhat[1])?;
    let w = params.input_weights();
    let penalty = regularization_penalty(w, loss.lambda, loss.p);

    let mut zero_embeddings = 0u64;
    let mut pair_distances = PairDistances::default();
    let (report, class_grads, contrast_grads) = if semi {
        let mut logits = [Matrix::zeros(b, cfg.n_classes), Matrix::zeros(b, cfg.n_classes)];
        let mut zn = [Matrix::zeros(b, cfg.z_dim), Matrix::zeros(b, cfg.z_dim)];
        for br in 0..2 {
            for i in 0..b {
                logits[br].row_mut(i).copy_from_slice(&params.classify(z[br].row(i)));
                let (n, was_zero) = l2_normalize(z[br].row(i));
                zero_embeddings += u64::from(was_zero);
                zn[br].row_mut(i).copy_from_slice(&n);
            }
        }
        let (cls, gl1, gl2) = classification_loss_masked(&logits[0], &logits[1], &batch.labels[0], &batch.labels[1])?;
        let (con, gz1, gz2) =
            contrastive_loss_masked(&zn[0], &zn[1], &batch.labels[0], &batch.labels[1], loss.margin)?;
        pair_distances = pair_distance_stats(&zn, &batch.labels);
        (
            LossReport::semi_supervised(0, recon, penalty, cls, con, loss),
            Some([gl1, gl2]),
            Some([gz1, gz2]),
        )
    } else {
        (LossReport::self_supervised(0, recon, penalty), None, None)
    };

    if !report.total.is_finite() {
        return Ok(Objective { report, grads: None, pair_distances, zero_embeddings });
    }
    if !want_grad {
        return Ok(Objective { report, grads: None, pair_distances, zero_embeddings });
    }

    let mut grads = params.zeros_like();
    let gx = [gx1, gx2];
    for br in 0..2 {
        for i in 0..b {
            let zi = z[br].row(i);
            let mut dz = params.decoder_backward(zi, xhat[br].row(i), gx[br].row(i), &mut grads);
            if let Some(cg) = &class_grads {
                if loss.alpha != 0.0 && batch.labels[br][i].is_some() {
                    let dlogits: Vec<f64> = cg[br].row(i).iter().map(|g| loss.alpha * g).collect();
                    let dzc = params.classifier_backward(zi, &dlogits, &mut grads);
                    add(&mut dz, &dzc);
                }
            }
            if let Some(kg) = &contrast_grads {
                if loss.beta != 0.0 && batch.labels[0][i].is_some() && batch.labels[1][i].is_some() {
                    let dn: Vec<f64> = kg[br].row(i).iter().map(|g| loss.beta * g).collect();
                    add(&mut dz, &l2_normalize_backward(zi, &dn));
                }
            }
            params.encoder_backward(&traces[br][i], &dz, &mut grads);
        }
    }
    let pg = regularization_penalty_grad(w, loss.lambda, loss.p);
    add(params.layout().input_weights().of_mut(&mut grads), &pg);
    Ok(Objective { report, grads: Some(grads), pair_distances, zero_embeddings })
}

fn pair_distance_stats(zn: &[Matrix; 2], labels: &[Vec<Option<usize>>; 2]) -> PairDistances {
    let (mut s, mut ns, mut d, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..zn[0].rows() {
        if let (Some(a), Some(b)) = (labels[0][i], labels[1][i]) {
            let dist = libm::sqrt(zn[0].row(i).iter().zip(zn[1].row(i)).map(|(x, y)| (x - y) * (x - y)).sum());
            if a == b {
                s += dist;
                ns += 1;
            } else {
                d += dist;
                nd += 1;
            }
        }
    }
    PairDistances {
        similar_mean: (ns > 0).then(|| s / ns as f64),
        dissimilar_mean: (nd > 0).then(|| d / nd as f64),
    }
}

#[inline]
fn add(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Per-step diagnostics reported alongside the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub report: LossReport,
    pub pair_distances: PairDistances,
}

/// Drives pretraining one step or epoch at a time.
pub struct Pretrainer<'a> {
    data: &'a TableDataset,
    config: TrainConfig,
    mode: TrainMode,
    marginals: EmpiricalMarginals,
    state: TrainState,
    warnings: Vec<TrainWarning>,
    zero_embeddings: u64,
}

impl<'a> Pretrainer<'a> {
    /// Starts a fresh run with parameters drawn from the init stream.
    pub fn new(data: &'a TableDataset, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let n_classes = data.n_classes.max(1);
        let mc = config.model.resolve(data.n_features(), n_classes);
        let params = ModelParameters::init(mc, &mut stream_rng(config.seed, streams::INIT))?;
        let state = TrainState::fresh(params, config.seed);
        Self::resume(data, config, state)
    }

    /// Continues from a saved state.
    pub fn resume(data: &'a TableDataset, config: TrainConfig, state: TrainState) -> Result<Self, TrainError> {
        config.validate()?;
        if data.n_samples() == 0 {
            return Err(TrainError::Empty);
        }
        let mc = state.params.config();
        if mc.n_features != data.n_features() {
            return Err(TrainError::FeatureMismatch { data: data.n_features(), model: mc.n_features });
        }
        let mut warnings = Vec::new();
        let mut mode = config.mode;
        if mode == TrainMode::SemiSupervised {
            if data.y.is_none() {
                return Err(TrainError::Unlabeled);
            }
            if data.n_labeled() == 0 {
                warnings.push(TrainWarning::NoLabeledRows);
                mode = TrainMode::SelfSupervised;
            } else if data.n_classes > mc.n_classes {
                return Err(TrainError::ClassMismatch { data: data.n_classes, model: mc.n_classes });
            }
        }
        if data.n_samples() < config.batch_size {
            warnings.push(TrainWarning::BatchShrunk { requested: config.batch_size, used: data.n_samples() });
        }
        let marginals = fit_marginals(&data.x)?;
        Ok(Self { data, config, mode, marginals, state, warnings, zero_embeddings: 0 })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Mode actually used (semi falls back to self without labeled rows).
    pub fn mode(&self) -> TrainMode {
        self.mode
    }

    pub fn warnings(&self) -> Vec<TrainWarning> {
        let mut w = self.warnings.clone();
        if self.zero_embeddings > 0 {
            w.push(TrainWarning::ZeroEmbeddings { count: self.zero_embeddings });
        }
        w
    }

    pub fn steps_per_epoch(&self) -> usize {
        steps_per_epoch(self.data.n_samples(), self.config.batch_size)
    }

    /// One optimizer step. On failure the state is left as it was before the step.
    pub fn step(&mut self) -> Result<StepInfo, TrainError> {
        let snapshot = self.state.clone();
        match self.try_step() {
            Ok(info) => Ok(info),
            Err(TrainError::Diverged { step, reason, .. }) => {
                self.state = snapshot.clone();
                Err(TrainError::Diverged { step, reason, last_good: Box::new(snapshot) })
            }
            Err(e) => {
                self.state = snapshot;
                Err(e)
            }
        }
    }

    fn try_step(&mut self) -> Result<StepInfo, TrainError> {
        let n = self.data.n_samples();
        let batches = sample_two_batches(n, self.config.batch_size, &mut self.state.data_rng);
        let cc = self.config.corruption();
        let rows1 = self.data.x.select_rows(&batches.first);
        let rows2 = self.data.x.select_rows(&batches.second);
        let (c1, _) = corrupt(&rows1, &self.marginals, &cc, &mut self.state.corruption_rng)?;
        let (c2, _) = corrupt(&rows2, &self.marginals, &cc, &mut self.state.corruption_rng)?;
        let batch = PreparedBatch::new(self.data, &batches, [c1, c2]);

        let step = self.state.step + 1;
        // `step` swaps in the pre-step snapshot as `last_good`.
        let diverged = |state: &TrainState, reason: String| TrainError::Diverged {
            step,
            reason,
            last_good: Box::new(state.clone()),
        };
        let obj = match batch_objective(&self.state.params, &batch, &self.config.loss, self.mode, true) {
            Ok(o) => o,
            Err(TrainError::Model(ModelError::NonFinite { layer })) => {
                return Err(diverged(&self.state, alloc::format!("non-finite activation after layer {layer}")))
            }
            Err(e) => return Err(e),
        };
        let mut report = obj.report;
        report.step = step;
        if !report.total.is_finite() {
            return Err(diverged(&self.state, alloc::format!("loss is {}", report.total)));
        }
        let grads = obj.grads.expect("gradient requested");
        let mut params = self.state.params.clone();
        let mut acc = self.state.accumulators.clone();
        if let Err(e) = self.config.optimizer().step(params.values_mut(), &grads, &mut acc) {
            let name = self.state.params.layout().name_of(e.index);
            return Err(diverged(&self.state, alloc::format!("non-finite gradient in `{name}`")));
        }
        self.state.params = params;
        self.state.accumulators = acc;
        self.state.step = step;
        self.zero_embeddings += obj.zero_embeddings;
        Ok(StepInfo { report, pair_distances: obj.pair_distances })
    }

    /// Runs `⌈n/B⌉` steps and returns their infos.
    pub fn run_epoch(&mut self) -> Result<Vec<StepInfo>, TrainError> {
        let steps = self.steps_per_epoch();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            out.push(self.step()?);
        }
        self.state.epoch += 1;
        Ok(out)
    }

    /// Runs until `config.epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn run<F>(&mut self, mut on_epoch: F) -> Result<Vec<LossReport>, TrainError>
    where
        F: FnMut(&TrainState, &[StepInfo]),
    {
        let mut log = Vec::new();
        while (self.state.epoch as usize) < self.config.epochs {
            let infos = self.run_epoch()?;
            log.extend(infos.iter().map(|i| i.report));
            on_epoch(&self.state, &infos);
        }
        Ok(log)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: TrainState,
    pub log: Vec<LossReport>,
    pub warnings: Vec<TrainWarning>,
}

fn pretrain(data: &TableDataset, config: TrainConfig) -> Result<PretrainOutcome, TrainError> {
    let mut trainer = Pretrainer::new(data, config)?;
    let log = trainer.run(|_, _| {})?;
    let warnings = trainer.warnings();
    Ok(PretrainOutcome { state: trainer.into_state(), log, warnings })
}

/// Reconstruction + input-weight penalty only; the classifier head is untouched.
pub fn pretrain_self(data: &TableDataset, config: TrainConfig) -> Result<PretrainOutcome, TrainError> {
    pretrain(data, TrainConfig { mode: TrainMode::SelfSupervised, ..config })
}

/// Full semi-supervised objective; label-dependent terms use labeled rows only.
pub fn pretrain_semi(data: &TableDataset, config: TrainConfig) -> Result<PretrainOutcome, TrainError> {
    pretrain(data, TrainConfig { mode: TrainMode::SemiSupervised, ..config })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub seed: u64,
    /// Train only the linear head (a linear probe on frozen embeddings).
    pub freeze_encoder: bool,
}

impl FinetuneConfig {
    /// Optimizer settings inherited from pretraining.
    pub fn from_train(t: &TrainConfig, epochs: usize) -> Self {
        Self {
            epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            rmsprop_decay: t.rmsprop_decay,
            rmsprop_epsilon: t.rmsprop_epsilon,
            seed: t.seed,
            freeze_encoder: false,
        }
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::from_train(&TrainConfig::default(), 100)
    }
}

/// Encoder plus linear head trained end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetunedModel {
    params: ModelParameters,
    /// Mean training cross-entropy recorded after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl FinetunedModel {
    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    /// Class probabilities, one row per input row.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        let k = self.params.config().n_classes;
        let mut out = Matrix::zeros(x.rows(), k);
        for i in 0..x.rows() {
            let z = self.params.encode(x.row(i))?;
            out.row_mut(i).copy_from_slice(&crate::losses::softmax(&self.params.finetune_logits(&z)));
        }
        Ok(out)
    }

    /// Mean cross-entropy over the labeled rows of `data`.
    pub fn mean_cross_entropy(&self, data: &TableDataset) -> Result<f64, ModelError> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..data.n_samples() {
            if let Some(y) = data.label(i) {
                let z = self.params.encode(data.x.row(i))?;
                sum += crate::losses::cross_entropy(&self.params.finetune_logits(&z), y);
                n += 1;
            }
        }
        Ok(sum / n.max(1) as f64)
    }
}

/// Attaches a freshly initialized linear head and minimizes cross-entropy
/// on the labeled rows. No corruption is applied.
pub fn finetune(params: &ModelParameters, data: &TableDataset, cfg: &FinetuneConfig) -> Result<FinetunedModel, TrainError> {
    let mc = *params.config();
    if mc.n_features != data.n_features() {
        return Err(TrainError::FeatureMismatch { data: data.n_features(), model: mc.n_features });
    }
    if data.y.is_none() {
        return Err(TrainError::Unlabeled);
    }
    if data.n_classes != mc.n_classes {
        return Err(TrainError::ClassMismatch { data: data.n_classes, model: mc.n_classes });
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(TrainError::InvalidConfig("fine-tune batch size and learning rate must be positive".into()));
    }
    let mut p = params.clone();
    p.reset_finetune_head(&mut stream_rng(cfg.seed, streams::FINETUNE_INIT));
    let mut rng = stream_rng(cfg.seed, streams::FINETUNE_DATA);
    let opt = RmsProp { learning_rate: cfg.learning_rate, decay: cfg.rmsprop_decay, epsilon: cfg.rmsprop_epsilon };
    let mut acc = p.zeros_like();
    let mut labeled: Vec<usize> = (0..data.n_samples()).filter(|&i| data.label(i).is_some()).collect();
    if labeled.is_empty() {
        return Err(TrainError::Unlabeled);
    }
    // A frozen encoder never changes, so embeddings are computed once.
    let frozen_z: Option<Vec<Vec<f64>>> = if cfg.freeze_encoder {
        Some(labeled.iter().map(|&i| p.encode(data.x.row(i))).collect::<Result<_, _>>()?)
    } else {
        None
    };
    let pos: Vec<usize> = {
        let mut v = vec![usize::MAX; data.n_samples()];
        for (k, &i) in labeled.iter().enumerate() {
            v[i] = k;
        }
        v
    };

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        labeled.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in labeled.chunks(cfg.batch_size) {
            let inv = 1.0 / chunk.len() as f64;
            let mut grads = p.zeros_like();
            for &i in chunk {
                let y = data.label(i).expect("labeled row");
                let (z, trace) = match &frozen_z {
                    Some(zs) => (zs[pos[i]].clone(), None),
                    None => {
                        let (z, t) = p.encode_traced(data.x.row(i))?;
                        (z, Some(t))
                    }
                };
                let (l, g) = cross_entropy_grad(&p.finetune_logits(&z), y);
                epoch_sum += l;
                let g: Vec<f64> = g.iter().map(|v| v * inv).collect();
                let dz = p.finetune_backward(&z, &g, &mut grads);
                if let Some(t) = trace {
                    p.encoder_backward(&t, &dz, &mut grads);
                }
            }
            step += 1;
            if let Err(e) = opt.step(p.values_mut(), &grads, &mut acc) {
                let name = p.layout().name_of(e.index);
                return Err(TrainError::Diverged {
                    step,
                    reason: alloc::format!("non-finite gradient in `{name}` during fine-tuning"),
                    last_good: Box::new(TrainState::fresh(p.clone(), cfg.seed)),
                });
            }
        }
        epoch_losses.push(epoch_sum / labeled.len() as f64);
    }
    Ok(FinetunedModel { params: p, epoch_losses })
}
