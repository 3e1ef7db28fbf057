//! Command-line front end.
//!
//! Every subcommand's options can also come from a JSON run config
//! (`--config`); explicit flags win over the file, and the file wins over
//! built-in defaults. Each run writes `resolved_config.json` to its output
//! directory, which can be passed back through `--config` to repeat it.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use recontab_core::corruption::CorruptionMode;
use recontab_core::data::{
    fit_preprocessor, infer_schema, split_raw, transform_with, DataError, PreprocessorState, TableDataset,
    UnseenCategoryPolicy, DEFAULT_MAX_CATEGORICAL_CARDINALITY,
};
use recontab_core::evaluation::{
    ablation_runner, baseline_adapter, plug_and_play_features, report_from_scores, AblationConfig, AblationMetric,
    AdapterRegistry, BaselineOutcome, EvalError, FeatureMode, LogisticAdapter, LogisticConfig, ReportContext,
};
use recontab_core::data::Splits;
use recontab_core::losses::{LossConfig, PenaltyNorm};
use recontab_core::model::ModelHyper;
use recontab_core::training::{finetune, FinetuneConfig, Pretrainer, TrainConfig, TrainError, TrainMode, TrainWarning};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::ProcessAdapter;
use crate::formats::{
    load_json, load_preprocessor, preprocessor_hash, render_table1, render_table2, save_json, save_preprocessor,
    write_embeddings, write_jsonl, Checkpoint, LossLogWriter,
};
use crate::io::{load_csv, read_dataset, write_dataset, CsvOptions, IoError, DEFAULT_MISSING_TOKENS};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "RECONTAB_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "recontab-out";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug, Parser)]
#[command(name = "recontab", version, about = "Regularized contrastive representation learning for tabular data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Seed for every random stream (initialization, batching, corruption, splits).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run config; command-line flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: $RECONTAB_OUT_DIR, else ./recontab-out].
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Infer column types of a raw CSV.
    Schema(SchemaArgs),
    /// Split a raw CSV, fit preprocessing on the training part and write processed splits.
    Preprocess(PreprocessArgs),
    /// Pretrain the encoder (self- or semi-supervised).
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained encoder with a linear head.
    Finetune(FinetuneArgs),
    /// Export L2-normalized embeddings.
    Embed(EmbedArgs),
    /// Evaluate baselines on raw, distilled and/or concatenated features.
    Eval(EvalArgs),
    /// Sweep the corruption ratio.
    Ablate(AblateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Schema(_) => "schema",
            Command::Preprocess(_) => "preprocess",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Embed(_) => "embed",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct CsvFlags {
    /// Raw input CSV (header row required).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Name of the label column.
    #[arg(long)]
    pub label: Option<String>,
    /// Cell values treated as missing [default: "", "NA", "?"].
    #[arg(long, value_delimiter = ',')]
    pub missing: Option<Vec<String>>,
    /// Distinct-value count at or below which a column is categorical.
    #[arg(long)]
    pub max_categorical: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct SchemaArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub csv: CsvFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnseenArg {
    Modal,
    Error,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct PreprocessArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub csv: CsvFlags,
    /// Train, validation and test fractions [default: 0.8,0.1,0.1].
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Apply an already fitted preprocessor to the whole input instead of splitting.
    #[arg(long)]
    pub apply: Option<PathBuf>,
    /// Handling of categories unseen at fit time [default: modal].
    #[arg(long, value_enum)]
    pub unseen: Option<UnseenArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    #[value(name = "self")]
    #[serde(rename = "self")]
    SelfSupervised,
    Semi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionArg {
    Marginal,
    Gaussian,
}

/// Training hyperparameters shared by `pretrain` and `ablate`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainFlags {
    /// Training mode [default: semi].
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Fraction of features corrupted per row [default: 0.3].
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Corruption source [default: marginal].
    #[arg(long, value_enum)]
    pub corruption: Option<CorruptionArg>,
    /// Noise level for `--corruption gaussian` [default: 0.1].
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Training epochs [default: 1000].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 128].
    #[arg(long)]
    pub batch: Option<usize>,
    /// RMSProp learning rate [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// RMSProp decay [default: 0.9].
    #[arg(long)]
    pub rho: Option<f64>,
    /// RMSProp epsilon [default: 1e-8].
    #[arg(long)]
    pub eps: Option<f64>,
    /// Contrastive margin [default: 2].
    #[arg(long)]
    pub margin: Option<f64>,
    /// Input-weight penalty coefficient [default: 0.01].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Input-weight penalty norm, 1 or 2 [default: 2].
    #[arg(long)]
    pub p: Option<u32>,
    /// Classification weight [default: 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Contrastive weight [default: 1].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Token width [default: 16].
    #[arg(long)]
    pub token_dim: Option<usize>,
    /// Transformer blocks [default: 3].
    #[arg(long)]
    pub layers: Option<usize>,
    /// Attention heads [default: 2].
    #[arg(long)]
    pub heads: Option<usize>,
    /// Bottleneck width [default: floor(M/2)].
    #[arg(long)]
    pub z_dim: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct PretrainArgs {
    /// Processed training data (written by `preprocess`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Preprocessor state; fixes the class count and is hashed into checkpoints.
    #[arg(long)]
    pub preprocessor: Option<PathBuf>,
    /// Continue from a checkpoint carrying optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Write a checkpoint every this many epochs (0: final only).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct FinetuneArgs {
    /// Pretrained checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Processed labeled training data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Processed test data to score after training.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub preprocessor: Option<PathBuf>,
    /// Fine-tuning epochs [default: 100].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate [default: the pretraining one].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Batch size [default: the pretraining one].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Train only the head on frozen embeddings.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub linear_probe: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Processed data to embed.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturesArg {
    Raw,
    Distilled,
    Concat,
    All,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Checkpoint providing embeddings (needed for distilled/concat).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub preprocessor: Option<PathBuf>,
    /// Feature modes to evaluate [default: all].
    #[arg(long, value_enum, value_delimiter = ',')]
    pub features: Option<Vec<FeaturesArg>>,
    /// External baseline as `name=program [args..]`; repeatable.
    #[arg(long)]
    pub adapter: Option<Vec<String>>,
    /// Dataset label used in reports [default: dataset].
    #[arg(long)]
    pub dataset_name: Option<String>,
    /// L2 weight of the logistic-regression baseline [default: 1e-4].
    #[arg(long)]
    pub l2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMetricArg {
    Finetune,
    PlugAndPlay,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Processed data the metric is computed on.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub preprocessor: Option<PathBuf>,
    /// Corruption ratios [default: 0.0,0.1,...,0.6].
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    /// Scoring protocol [default: finetune].
    #[arg(long, value_enum)]
    pub metric: Option<AblationMetricArg>,
    /// Fine-tuning epochs [default: 100].
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// Fine-tuning learning rate [default: the pretraining one].
    #[arg(long)]
    pub finetune_lr: Option<f64>,
    #[arg(long)]
    pub dataset_name: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train_flags: TrainFlags,
}

/// The on-disk run config: what `--config` reads and `resolved_config.json` holds.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub args: Value,
    /// Fully resolved hyperparameters (informational).
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub resolved: Value,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Diverged(m) => write!(f, "training diverged: {m}"),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::InvalidConfig(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("recontab: {e}");
            e.exit_code()
        }
    }
}

/// Overlays the non-null fields of `flags` onto `file`.
fn overlay(file: Value, flags: Value) -> Value {
    match (file, flags) {
        (Value::Object(mut base), Value::Object(top)) => {
            for (k, v) in top {
                if !v.is_null() {
                    base.insert(k, v);
                }
            }
            Value::Object(base)
        }
        (file, Value::Null) => file,
        (_, flags) => flags,
    }
}

fn merge_args<T: Serialize + for<'de> Deserialize<'de>>(file: &Value, flags: &T) -> Result<T, CliError> {
    let flags = serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))?;
    let file = if file.is_null() { Value::Object(Default::default()) } else { file.clone() };
    serde_json::from_value(overlay(file, flags)).map_err(|e| CliError::Usage(format!("config file: {e}")))
}

struct Ctx {
    command: &'static str,
    seed: u64,
    out_dir: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn snapshot<T: Serialize>(&self, args: &T, resolved: Value) -> Result<(), CliError> {
        let cfg = RunConfig {
            command: Some(self.command.to_string()),
            seed: Some(self.seed),
            out_dir: Some(self.out_dir.clone()),
            args: serde_json::to_value(args).map_err(|e| CliError::Data(e.to_string()))?,
            resolved,
        };
        save_json(&self.path(RESOLVED_CONFIG_FILE), &cfg)?;
        Ok(())
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let file: RunConfig = match &cli.config {
        Some(p) => load_json(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    let command = cli.command.name();
    if let Some(c) = &file.command {
        if c != command {
            return Err(CliError::Usage(format!("config file is for `{c}`, not `{command}`")));
        }
    }
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let out_dir = cli
        .out_dir
        .or(file.out_dir)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Data(format!("cannot create `{}`: {e}", out_dir.display())))?;
    let ctx = Ctx { command, seed, out_dir };
    match cli.command {
        Command::Schema(a) => cmd_schema(&ctx, merge_args(&file.args, &a)?),
        Command::Preprocess(a) => cmd_preprocess(&ctx, merge_args(&file.args, &a)?),
        Command::Pretrain(a) => cmd_pretrain(&ctx, merge_args(&file.args, &a)?),
        Command::Finetune(a) => cmd_finetune(&ctx, merge_args(&file.args, &a)?),
        Command::Embed(a) => cmd_embed(&ctx, merge_args(&file.args, &a)?),
        Command::Eval(a) => cmd_eval(&ctx, merge_args(&file.args, &a)?),
        Command::Ablate(a) => cmd_ablate(&ctx, merge_args(&file.args, &a)?),
    }
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
}

fn existing(p: &Path) -> Result<&Path, CliError> {
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::Data(format!("input path `{}` does not exist", p.display())))
    }
}

fn csv_options(c: &CsvFlags) -> CsvOptions {
    CsvOptions {
        label_column: c.label.clone(),
        missing_tokens: c
            .missing
            .clone()
            .unwrap_or_else(|| DEFAULT_MISSING_TOKENS.iter().map(|s| s.to_string()).collect()),
    }
}

fn cmd_schema(ctx: &Ctx, a: SchemaArgs) -> Result<(), CliError> {
    let input = existing(required(&a.csv.input, "input")?)?;
    let table = load_csv(input, &csv_options(&a.csv))?;
    let schema = infer_schema(&table, a.csv.max_categorical.unwrap_or(DEFAULT_MAX_CATEGORICAL_CARDINALITY));
    for c in &schema {
        let kind = if c.all_missing { "all-missing".to_string() } else { format!("{:?}", c.kind).to_lowercase() };
        println!("{:<24} {kind:<12} {}", c.name, c.categories.len());
    }
    save_json(&ctx.path("schema.json"), &schema)?;
    ctx.snapshot(&a, Value::Null)
}

fn cmd_preprocess(ctx: &Ctx, a: PreprocessArgs) -> Result<(), CliError> {
    let input = existing(required(&a.csv.input, "input")?)?;
    let table = load_csv(input, &csv_options(&a.csv))?;
    let policy = match a.unseen.unwrap_or(UnseenArg::Modal) {
        UnseenArg::Modal => UnseenCategoryPolicy::Modal,
        UnseenArg::Error => UnseenCategoryPolicy::Error,
    };
    let report_unseen = |name: &str, n: usize| {
        if n > 0 {
            warn!("{name}: {n} cells had categories unseen at fit time and were encoded as the mode");
        }
    };
    if let Some(state_path) = &a.apply {
        let state = load_preprocessor(existing(state_path)?)?;
        let (ds, rep) = transform_with(&table, &state, policy)?;
        report_unseen("data", rep.unseen_categories);
        write_dataset(&ctx.path("data.csv"), &ds)?;
        info!("wrote {} rows × {} features", ds.n_samples(), ds.n_features());
        return ctx.snapshot(&a, Value::Null);
    }
    let fractions = a.fractions.clone().unwrap_or_else(|| vec![0.8, 0.1, 0.1]);
    let [ft, fv, fs] = fractions[..] else {
        return Err(CliError::Usage("--fractions takes exactly three values".into()));
    };
    let parts = split_raw(&table, (ft, fv, fs), ctx.seed).map_err(|e| match e {
        DataError::BadFractions(..) => CliError::Usage(e.to_string()),
        other => other.into(),
    })?;
    let max_cat = a.csv.max_categorical.unwrap_or(DEFAULT_MAX_CATEGORICAL_CARDINALITY);
    let schema = infer_schema(&parts.train, max_cat);
    let state = fit_preprocessor(&parts.train, &schema)?;
    for c in &state.dropped_columns {
        info!("dropped all-missing column `{c}`");
    }
    save_json(&ctx.path("schema.json"), &schema)?;
    save_preprocessor(&ctx.path("preprocessor.json"), &state)?;
    for (name, part, idx) in [("train", &parts.train, &parts.indices[0]), ("val", &parts.val, &parts.indices[1]), ("test", &parts.test, &parts.indices[2])] {
        let (mut ds, rep) = transform_with(part, &state, policy)?;
        report_unseen(name, rep.unseen_categories);
        ds.row_ids = idx.iter().map(|&i| i as u64).collect();
        write_dataset(&ctx.path(&format!("{name}.csv")), &ds)?;
        info!("{name}: {} rows × {} features", ds.n_samples(), ds.n_features());
    }
    ctx.snapshot(&a, serde_json::json!({ "fractions": [ft, fv, fs], "max_categorical": max_cat }))
}

fn load_data(path: &Option<PathBuf>, flag: &str, state: Option<&PreprocessorState>) -> Result<TableDataset, CliError> {
    let p = existing(required(path, flag)?)?;
    Ok(read_dataset(p, state.map(|s| s.label_classes.len()))?)
}

fn load_state(p: &Option<PathBuf>) -> Result<Option<PreprocessorState>, CliError> {
    p.as_deref().map(|p| load_preprocessor(existing(p)?).map_err(CliError::from)).transpose()
}

fn train_config(f: &TrainFlags, seed: u64, checkpoint_every: usize, base: TrainConfig) -> Result<TrainConfig, CliError> {
    let loss = LossConfig {
        lambda: f.lambda.unwrap_or(base.loss.lambda),
        p: match f.p {
            Some(p) => PenaltyNorm::from_order(p).ok_or_else(|| CliError::Usage(format!("--p must be 1 or 2, got {p}")))?,
            None => base.loss.p,
        },
        alpha: f.alpha.unwrap_or(base.loss.alpha),
        beta: f.beta.unwrap_or(base.loss.beta),
        margin: f.margin.unwrap_or(base.loss.margin),
    };
    let corruption_mode = match f.corruption {
        Some(CorruptionArg::Gaussian) => CorruptionMode::GaussianNoise { sigma: f.sigma.unwrap_or(0.1) },
        Some(CorruptionArg::Marginal) => CorruptionMode::EmpiricalMarginal,
        None => base.corruption_mode,
    };
    let model = ModelHyper {
        token_dim: f.token_dim.unwrap_or(base.model.token_dim),
        n_layers: f.layers.unwrap_or(base.model.n_layers),
        n_heads: f.heads.unwrap_or(base.model.n_heads),
        z_dim: f.z_dim.or(base.model.z_dim),
        ..base.model
    };
    let cfg = TrainConfig {
        batch_size: f.batch.unwrap_or(base.batch_size),
        epochs: f.epochs.unwrap_or(base.epochs),
        learning_rate: f.lr.unwrap_or(base.learning_rate),
        rmsprop_decay: f.rho.unwrap_or(base.rmsprop_decay),
        rmsprop_epsilon: f.eps.unwrap_or(base.rmsprop_epsilon),
        corruption_ratio: f.ratio.unwrap_or(base.corruption_ratio),
        corruption_mode,
        loss,
        mode: match f.mode {
            Some(ModeArg::SelfSupervised) => TrainMode::SelfSupervised,
            Some(ModeArg::Semi) => TrainMode::SemiSupervised,
            None => base.mode,
        },
        seed,
        checkpoint_every,
        model,
    };
    cfg.validate()?;
    let mc = cfg.model.resolve(1, 1);
    if mc.token_dim == 0 || mc.n_heads == 0 || mc.token_dim % mc.n_heads != 0 || mc.n_layers == 0 {
        return Err(CliError::Usage("--token-dim must be a positive multiple of --heads and --layers positive".into()));
    }
    Ok(cfg)
}

fn log_warnings(w: &[TrainWarning]) {
    for w in w {
        match w {
            TrainWarning::BatchShrunk { requested, used } => warn!("dataset smaller than batch size {requested}; using {used}"),
            TrainWarning::NoLabeledRows => warn!("no labeled rows; training self-supervised only"),
            TrainWarning::ZeroEmbeddings { count } => warn!("{count} zero-norm embeddings were left unnormalized"),
        }
    }
}

fn cmd_pretrain(ctx: &Ctx, a: PretrainArgs) -> Result<(), CliError> {
    let state_pp = load_state(&a.preprocessor)?;
    let data = load_data(&a.data, "data", state_pp.as_ref())?;
    let hash = state_pp.as_ref().map(preprocessor_hash);
    let resumed = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(existing(p)?)?;
            Some(ck.train_state().ok_or_else(|| CliError::Data(format!("`{}` carries no optimizer state", p.display())))?)
        }
        None => None,
    };
    let base = resumed.as_ref().map_or_else(TrainConfig::default, |(_, c)| *c);
    let seed = resumed.as_ref().map_or(ctx.seed, |(_, c)| c.seed);
    let cfg = train_config(&a.train, seed, a.checkpoint_every.unwrap_or(base.checkpoint_every), base)?;
    ctx.snapshot(&a, serde_json::to_value(cfg).unwrap_or(Value::Null))?;

    let mut trainer = match resumed {
        Some((state, _)) => Pretrainer::resume(&data, cfg, state)?,
        None => Pretrainer::new(&data, cfg)?,
    };
    log_warnings(&trainer.warnings());
    let mut log = LossLogWriter::open(&ctx.path("loss_log.csv"), a.resume.is_some())?;
    let start = Instant::now();
    let mut io_err: Option<IoError> = None;
    let result = trainer.run(|state, infos| {
        let mean = infos.iter().map(|i| i.report.total).sum::<f64>() / infos.len().max(1) as f64;
        info!("epoch {}/{}: mean loss {mean:.6}", state.epoch, cfg.epochs);
        for i in infos {
            if let Err(e) = log.write(&i.report, start.elapsed().as_millis()) {
                io_err.get_or_insert(e);
            }
        }
        if cfg.checkpoint_every > 0 && state.epoch as usize % cfg.checkpoint_every == 0 {
            let ck = Checkpoint::from_train_state(state, &cfg, hash.clone());
            if let Err(e) = ck.save(&ctx.path(&format!("checkpoint_epoch{:05}.json", state.epoch))) {
                io_err.get_or_insert(e);
            }
        }
    });
    log.flush()?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    match result {
        Ok(_) => {
            let state = trainer.state();
            Checkpoint::from_train_state(state, &cfg, hash).save(&ctx.path("checkpoint.json"))?;
            log_warnings(&trainer.warnings());
            info!("wrote {}", ctx.path("checkpoint.json").display());
            Ok(())
        }
        Err(TrainError::Diverged { step, reason, last_good }) => {
            let p = ctx.path("checkpoint_last_good.json");
            Checkpoint::from_train_state(&last_good, &cfg, hash).save(&p)?;
            Err(CliError::Diverged(format!("step {step}: {reason}; last good state saved to {}", p.display())))
        }
        Err(e) => Err(e.into()),
    }
}

fn write_predictions(path: &Path, ids: &[u64], proba: &recontab_core::linalg::Matrix) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
    let mut header = vec!["row_id".to_string()];
    header.extend((0..proba.cols()).map(|k| format!("class_{k}")));
    w.write_record(&header).map_err(|e| CliError::Data(e.to_string()))?;
    for (id, row) in ids.iter().zip(proba.iter_rows()) {
        let mut rec = vec![id.to_string()];
        rec.extend(row.iter().map(|v| crate::formats::format_sig17(*v)));
        w.write_record(&rec).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))
}

fn dataset_label(name: &Option<String>) -> String {
    name.clone().unwrap_or_else(|| "dataset".into())
}

fn cmd_finetune(ctx: &Ctx, a: FinetuneArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(existing(required(&a.checkpoint, "checkpoint")?)?)?;
    let state_pp = load_state(&a.preprocessor)?;
    let data = load_data(&a.data, "data", state_pp.as_ref())?.labeled_subset();
    let base = ck.resume.as_ref().map_or_else(TrainConfig::default, |r| r.train_config);
    let cfg = FinetuneConfig {
        epochs: a.epochs.unwrap_or(100),
        learning_rate: a.lr.unwrap_or(base.learning_rate),
        batch_size: a.batch.unwrap_or(base.batch_size),
        seed: ctx.seed,
        freeze_encoder: a.linear_probe.unwrap_or(false),
        ..FinetuneConfig::from_train(&base, 0)
    };
    ctx.snapshot(&a, serde_json::to_value(cfg).unwrap_or(Value::Null))?;
    let model = finetune(&ck.params, &data, &cfg)?;
    if let Some(l) = model.epoch_losses.last() {
        info!("final training cross-entropy {l:.6}");
    }
    Checkpoint { params: model.params().clone(), resume: None, ..ck }.save(&ctx.path("finetuned.json"))?;
    if a.test.is_some() {
        let test = load_data(&a.test, "test", state_pp.as_ref())?;
        let proba = model.predict_proba(&test.x).map_err(|e| CliError::Data(e.to_string()))?;
        write_predictions(&ctx.path("predictions.csv"), &test.row_ids, &proba)?;
        let labeled = test.labeled_subset();
        if labeled.n_samples() > 0 {
            let p = model.predict_proba(&labeled.x).map_err(|e| CliError::Data(e.to_string()))?;
            let name = dataset_label(&None);
            let method = if cfg.freeze_encoder { "recontab-probe" } else { "recontab-finetune" };
            let r = report_from_scores(&ReportContext { dataset: &name, method, feature_mode: FeatureMode::Raw }, &p, &labeled, None)?;
            println!("{} {}: {:.4} (n_test {})", r.method, r.metric.as_str(), r.value, r.n_test);
            write_jsonl(&ctx.path("metrics.jsonl"), &[r])?;
        }
    }
    Ok(())
}

fn cmd_embed(ctx: &Ctx, a: EmbedArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(existing(required(&a.checkpoint, "checkpoint")?)?)?;
    let data = load_data(&a.data, "data", None)?;
    let emb = recontab_core::evaluation::embed_dataset(&ck.params, &data)?;
    write_embeddings(&ctx.path("embeddings.csv"), &emb)?;
    info!("embedded {} rows into {} dimensions", emb.z.rows(), emb.z.cols());
    ctx.snapshot(&a, Value::Null)
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs) -> Result<(), CliError> {
    let state_pp = load_state(&a.preprocessor)?;
    let train = load_data(&a.train, "train", state_pp.as_ref())?.labeled_subset();
    let mut test = load_data(&a.test, "test", state_pp.as_ref())?.labeled_subset();
    test.n_classes = test.n_classes.max(train.n_classes);
    let modes: Vec<FeatureMode> = {
        let sel = a.features.clone().unwrap_or_else(|| vec![FeaturesArg::All]);
        let mut m = Vec::new();
        for f in sel {
            let add: &[FeatureMode] = match f {
                FeaturesArg::Raw => &[FeatureMode::Raw],
                FeaturesArg::Distilled => &[FeatureMode::Distilled],
                FeaturesArg::Concat => &[FeatureMode::Concat],
                FeaturesArg::All => &FeatureMode::ALL,
            };
            for x in add {
                if !m.contains(x) {
                    m.push(*x);
                }
            }
        }
        m.sort_by_key(|x| FeatureMode::ALL.iter().position(|y| y == x));
        m
    };
    let ck = match &a.checkpoint {
        Some(p) => Some(Checkpoint::load(existing(p)?)?),
        None if modes.iter().any(|m| *m != FeatureMode::Raw) => {
            return Err(CliError::Usage("--checkpoint is required for distilled or concat features".into()))
        }
        None => None,
    };
    let logistic = LogisticConfig { l2: a.l2.unwrap_or(LogisticConfig::default().l2), ..LogisticConfig::default() };
    let mut registry = AdapterRegistry::new();
    registry.register(Box::new(LogisticAdapter { config: logistic }));
    let mut methods = vec!["logistic".to_string()];
    for spec in a.adapter.clone().unwrap_or_default() {
        let ad = ProcessAdapter::parse(&spec).ok_or_else(|| CliError::Usage(format!("bad --adapter `{spec}`; expected name=program")))?;
        methods.push(ad.name.clone());
        registry.register(Box::new(ad));
    }
    ctx.snapshot(&a, serde_json::json!({ "logistic": logistic, "modes": modes }))?;
    let name = dataset_label(&a.dataset_name);
    let mut outcomes = Vec::new();
    for mode in &modes {
        let (tr, te) = match &ck {
            Some(ck) => plug_and_play_features(&ck.params, &train, &test, *mode)?,
            None => (train.clone(), test.clone()),
        };
        for m in &methods {
            let o = baseline_adapter(&registry, m, &tr, &te, &name, *mode);
            match &o {
                BaselineOutcome::Report(r) => {
                    if let Some(w) = &r.warning {
                        warn!("{m} ({}): {w}", mode.as_str());
                    }
                }
                BaselineOutcome::Skipped { reason, .. } => warn!("{m} ({}) skipped: {reason}", mode.as_str()),
            }
            outcomes.push(o);
        }
    }
    let table = render_table1(&outcomes);
    print!("{table}");
    std::fs::write(ctx.path("table1.txt"), &table).map_err(|e| CliError::Data(e.to_string()))?;
    write_jsonl(&ctx.path("metrics.jsonl"), &outcomes)?;
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, a: AblateArgs) -> Result<(), CliError> {
    let state_pp = load_state(&a.preprocessor)?;
    let train = load_data(&a.train, "train", state_pp.as_ref())?;
    let mut eval = load_data(&a.eval, "eval", state_pp.as_ref())?;
    eval.n_classes = eval.n_classes.max(train.n_classes);
    let template = train_config(&a.train_flags, ctx.seed, 0, TrainConfig::default())?;
    let cfg = AblationConfig {
        template,
        finetune: FinetuneConfig {
            epochs: a.finetune_epochs.unwrap_or(100),
            learning_rate: a.finetune_lr.unwrap_or(template.learning_rate),
            ..FinetuneConfig::from_train(&template, 0)
        },
        metric: match a.metric.unwrap_or(AblationMetricArg::Finetune) {
            AblationMetricArg::Finetune => AblationMetric::Finetune,
            AblationMetricArg::PlugAndPlay => AblationMetric::PlugAndPlay,
        },
        logistic: LogisticConfig::default(),
        use_validation: false,
    };
    let ratios = a.ratios.clone().unwrap_or_else(|| (0..=6).map(|i| i as f64 / 10.0).collect());
    ctx.snapshot(&a, serde_json::json!({ "ablation": cfg, "ratios": ratios }))?;
    let name = dataset_label(&a.dataset_name);
    let splits = Splits { train, val: eval.clone(), test: eval };
    let table = ablation_runner(&[(name.as_str(), &splits)], &ratios, &cfg, |d, r, rep| {
        info!("{d} ratio {r:.2}: {} {:.4}", rep.metric.as_str(), rep.value);
    })?;
    let text = render_table2(&table);
    print!("{text}");
    std::fs::write(ctx.path("table2.txt"), &text).map_err(|e| CliError::Data(e.to_string()))?;
    save_json(&ctx.path("ablation.json"), &table)?;
    Ok(())
}
