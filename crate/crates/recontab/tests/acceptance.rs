//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero when a gating criterion fails.
//!
//! Arguments that parse as integers select criteria (`cargo test --test
//! acceptance -- 3 8`). Criterion 9 is non-gating and only runs when
//! `RECONTAB_ACCEPTANCE_FULL` is set or it is selected explicitly.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recontab::formats::{read_loss_log, render_table2, Checkpoint, LossLogWriter};
use recontab_core::corruption::{corrupt, fit_marginals, CorruptionConfig};
use recontab_core::data::{Splits, TableDataset};
use recontab_core::evaluation::{
    ablation_runner, auroc, logistic_regression, plug_and_play_features, report_from_scores, AblationConfig,
    AblationMetric, FeatureMode, LogisticConfig, ReportContext,
};
use recontab_core::linalg::Matrix;
use recontab_core::losses::{
    classification_loss, contrastive_loss, reconstruction_loss, LossConfig, LossReport, PenaltyNorm,
};
use recontab_core::model::{ModelHyper, ModelParameters};
use recontab_core::synthetic::{redundant_clusters, scaled_splits, SyntheticSpec};
use recontab_core::training::{
    batch_objective, finetune, pretrain_semi, FinetuneConfig, PreparedBatch, Pretrainer, TrainConfig, TrainMode,
    TwoBatches,
};

// ---- pinned tolerances and budgets ----------------------------------------

/// Max relative error of analytic vs central-difference gradients.
const GRAD_REL_TOL: f64 = 1e-4;
/// Central-difference step.
const GRAD_STEP: f64 = 1e-5;
/// Groups whose true gradient vanishes (softmax ignores the key bias) are
/// checked in absolute terms: both estimates must stay below this bound.
const GRAD_ZERO_ABS_TOL: f64 = 1e-8;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
/// Loss and AUROC implementations vs brute force.
const ORACLE_TOL: f64 = 1e-12;
const LOSS_BATCHES: usize = 100;
const AUROC_SETS: usize = 1000;
/// Two-sample KS critical coefficient for α = 0.01.
const KS_C_ALPHA: f64 = 1.628;
const CORRUPT_ROWS: usize = 10_000;
const CORRUPT_WIDTH: usize = 20;
const CORRUPT_RATIO: f64 = 0.3;
/// End-to-end benchmark.
const SYN_SEED: u64 = 7;
const SPLIT: (f64, f64, f64) = (0.6, 0.2, 0.2);
const E2E_EPOCHS: usize = 200;
const E2E_FINETUNE_EPOCHS: usize = 100;
const E2E_MIN_AUROC: f64 = 0.95;
const E2E_CONCAT_SLACK: f64 = 0.01;
const E2E_BUDGET: Duration = Duration::from_secs(600);
/// Regularization and ablation run at reduced length to fit the suite's
/// time budget.
const REG_EPOCHS: usize = 40;
const ABLATION_EPOCHS: usize = 20;
const ABLATION_FINETUNE_EPOCHS: usize = 20;
const ABLATION_RATIOS: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
/// Small-sample smoke run.
const SMOKE_EPOCHS: usize = 200;
const SMOKE_MIN_AUROC: f64 = 0.5;
const SMOKE_REFERENCE_AUROC: f64 = 0.907;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Criterion {
    id: u32,
    name: &'static str,
    gating: bool,
    run: fn() -> Outcome,
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let full = std::env::var_os("RECONTAB_ACCEPTANCE_FULL").is_some();
    let criteria = [
        Criterion { id: 1, name: "gradient correctness", gating: true, run: gradients },
        Criterion { id: 2, name: "loss oracles", gating: true, run: loss_oracles },
        Criterion { id: 3, name: "corruption contract", gating: true, run: corruption_contract },
        Criterion { id: 4, name: "determinism and resume", gating: true, run: determinism },
        Criterion { id: 5, name: "synthetic end-to-end benchmark", gating: true, run: end_to_end },
        Criterion { id: 6, name: "regularization behaviour", gating: true, run: regularization },
        Criterion { id: 7, name: "corruption-ratio ablation", gating: true, run: ablation },
        Criterion { id: 8, name: "metric correctness", gating: true, run: metric },
        Criterion { id: 9, name: "small-sample wide-table smoke run", gating: false, run: smoke },
    ];
    let mut failed = Vec::new();
    for c in &criteria {
        let chosen = if selected.is_empty() { c.gating || full } else { selected.contains(&c.id) };
        let tag = if c.gating { "" } else { " (non-gating)" };
        if !chosen {
            let why = if selected.is_empty() { "set RECONTAB_ACCEPTANCE_FULL=1 to run" } else { "not selected" };
            println!("criterion {} [{}]{tag}: SKIPPED ({why})", c.id, c.name);
            continue;
        }
        let t = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {} [{}]{tag}: {verdict} ({:.1}s) {}", c.id, c.name, t.elapsed().as_secs_f64(), o.detail);
        if !o.pass && c.gating {
            failed.push(c.id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

// ---- 1 --------------------------------------------------------------------

fn gradient_fixture() -> (ModelParameters, PreparedBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let x = Matrix::from_vec(12, 8, (0..96).map(|_| rng.gen::<f64>()).collect());
    let y: Vec<usize> = (0..12).map(|i| i % 2).collect();
    let data = TableDataset::with_labels(x, &y, 2);
    let hyper = ModelHyper { token_dim: 4, n_layers: 2, n_heads: 2, z_dim: Some(4), ..ModelHyper::default() };
    let mut params = ModelParameters::init(hyper.resolve(8, 2), &mut rng).unwrap();
    for w in params.tensor_mut("input_weights").unwrap() {
        *w += rng.gen_range(-0.3..0.3);
    }
    let batches = TwoBatches { first: vec![0, 2, 5, 9], second: vec![1, 4, 5, 10], shrunk: false };
    let mg = fit_marginals(&data.x).unwrap();
    let cc = CorruptionConfig { ratio: 0.3, ..CorruptionConfig::default() };
    let c1 = corrupt(&data.x.select_rows(&batches.first), &mg, &cc, &mut rng).unwrap().0;
    let c2 = corrupt(&data.x.select_rows(&batches.second), &mg, &cc, &mut rng).unwrap().0;
    (params, PreparedBatch::new(&data, &batches, [c1, c2]))
}

/// Worst relative error over parameter groups with the group it occurs in,
/// and the largest magnitude seen in vanishing groups.
fn worst_gradient_error(mode: TrainMode) -> (f64, String, f64) {
    let (params, batch) = gradient_fixture();
    let loss = LossConfig::default();
    let analytic = batch_objective(&params, &batch, &loss, mode, true).unwrap().grads.unwrap();
    let mut worst = (0.0, String::new(), 0.0f64);
    for spec in params.layout().specs() {
        // The fine-tuning head is not part of either pretraining objective.
        if spec.name.starts_with("finetune_head") {
            continue;
        }
        let mut numeric = Vec::with_capacity(spec.span.len);
        for i in spec.span.range() {
            let mut p = params.clone();
            p.values_mut()[i] += GRAD_STEP;
            let up = batch_objective(&p, &batch, &loss, mode, false).unwrap().report.total;
            p.values_mut()[i] -= 2.0 * GRAD_STEP;
            let down = batch_objective(&p, &batch, &loss, mode, false).unwrap().report.total;
            numeric.push((up - down) / (2.0 * GRAD_STEP));
        }
        let a = &analytic[spec.span.range()];
        let scale = a.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
        if scale < GRAD_ZERO_ABS_TOL {
            worst.2 = worst.2.max(scale);
            continue;
        }
        let err = a.iter().zip(&numeric).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let rel = err / scale;
        if rel >= worst.0 {
            worst.0 = rel;
            worst.1 = spec.name.clone();
        }
    }
    worst
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let (e_self, g_self, z_self) = worst_gradient_error(TrainMode::SelfSupervised);
    let (e_semi, g_semi, z_semi) = worst_gradient_error(TrainMode::SemiSupervised);
    let elapsed = t.elapsed();
    let zero = z_self.max(z_semi);
    outcome(
        e_self < GRAD_REL_TOL && e_semi < GRAD_REL_TOL && zero < GRAD_ZERO_ABS_TOL && elapsed < GRAD_BUDGET,
        format!(
            "max rel err self {e_self:.2e} ({g_self}), semi {e_semi:.2e} ({g_semi}); tol {GRAD_REL_TOL:.0e}; vanishing groups max |g| {zero:.1e} (tol {GRAD_ZERO_ABS_TOL:.0e}); {:.1}s of {}s",
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

// ---- 2 --------------------------------------------------------------------

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect())
}

fn brute_reconstruction(x1: &Matrix, h1: &Matrix, x2: &Matrix, h2: &Matrix) -> f64 {
    let (b, m) = x1.shape();
    let mut total = 0.0;
    for i in 0..b {
        let (mut a, mut c) = (0.0, 0.0);
        for j in 0..m {
            a += (h1.get(i, j) - x1.get(i, j)).powi(2);
            c += (h2.get(i, j) - x2.get(i, j)).powi(2);
        }
        total += a / m as f64 + c / m as f64;
    }
    total / b as f64
}

fn brute_ce(logits: &[f64], y: usize) -> f64 {
    let denom: f64 = logits.iter().map(|v| v.exp()).sum();
    -(logits[y].exp() / denom).ln()
}

fn brute_contrastive(z1: &Matrix, z2: &Matrix, y1: &[usize], y2: &[usize], margin: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..z1.rows() {
        let d = (0..z1.cols()).map(|k| (z1.get(i, k) - z2.get(i, k)).powi(2)).sum::<f64>().sqrt();
        total += if y1[i] == y2[i] { 0.5 * d * d } else { 0.5 * (margin - d).max(0.0).powi(2) };
    }
    total / z1.rows() as f64
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = [0.0f64; 3];
    for _ in 0..LOSS_BATCHES {
        let b = rng.gen_range(1..16);
        let m = rng.gen_range(1..12);
        let k = rng.gen_range(2..5);
        let x1 = random_matrix(&mut rng, b, m, 0.0, 1.0);
        let x2 = random_matrix(&mut rng, b, m, 0.0, 1.0);
        let h1 = random_matrix(&mut rng, b, m, 0.0, 1.0);
        let h2 = random_matrix(&mut rng, b, m, 0.0, 1.0);
        let r = reconstruction_loss(&x1, &h1, &x2, &h2).unwrap();
        worst[0] = worst[0].max((r - brute_reconstruction(&x1, &h1, &x2, &h2)).abs());

        let l1 = random_matrix(&mut rng, b, k, -5.0, 5.0);
        let l2 = random_matrix(&mut rng, b, k, -5.0, 5.0);
        let y1: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let y2: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let c = classification_loss(&l1, &l2, &y1, &y2).unwrap();
        let brute = (0..b).map(|i| brute_ce(l1.row(i), y1[i]) + brute_ce(l2.row(i), y2[i])).sum::<f64>() / b as f64;
        worst[1] = worst[1].max((c - brute).abs());

        let zd = rng.gen_range(1..6);
        let z1 = random_matrix(&mut rng, b, zd, -0.8, 0.8);
        let z2 = random_matrix(&mut rng, b, zd, -0.8, 0.8);
        let margin = rng.gen_range(0.5..2.5);
        let v = contrastive_loss(&z1, &z2, &y1, &y2, margin).unwrap();
        worst[2] = worst[2].max((v - brute_contrastive(&z1, &z2, &y1, &y2, margin)).abs());
    }
    // α = β = 0 must reproduce the self-supervised objective bit for bit.
    let mut bit_equal = true;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, 10, 6, 0.0, 1.0);
        let y: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let data = TableDataset::with_labels(x, &y, 2);
        let hyper = ModelHyper { token_dim: 4, n_layers: 2, n_heads: 2, ..ModelHyper::default() };
        let params = ModelParameters::init(hyper.resolve(6, 2), &mut rng).unwrap();
        let batches = TwoBatches { first: vec![0, 1, 2, 3], second: vec![4, 5, 6, 7], shrunk: false };
        let mg = fit_marginals(&data.x).unwrap();
        let cc = CorruptionConfig::default();
        let c1 = corrupt(&data.x.select_rows(&batches.first), &mg, &cc, &mut rng).unwrap().0;
        let c2 = corrupt(&data.x.select_rows(&batches.second), &mg, &cc, &mut rng).unwrap().0;
        let batch = PreparedBatch::new(&data, &batches, [c1, c2]);
        let loss = LossConfig { alpha: 0.0, beta: 0.0, ..LossConfig::default() };
        let semi = batch_objective(&params, &batch, &loss, TrainMode::SemiSupervised, false).unwrap().report;
        let plain = batch_objective(&params, &batch, &loss, TrainMode::SelfSupervised, false).unwrap().report;
        bit_equal &= semi.total.to_bits() == plain.total.to_bits();
    }
    outcome(
        worst.iter().all(|w| *w < ORACLE_TOL) && bit_equal,
        format!(
            "{LOSS_BATCHES} batches, max abs err reconstruction {:.1e}, classification {:.1e}, contrastive {:.1e} (tol {ORACLE_TOL:.0e}); zero-weight semi == self bitwise: {bit_equal}",
            worst[0], worst[1], worst[2]
        ),
    )
}

// ---- 3 --------------------------------------------------------------------

/// Two-sample Kolmogorov–Smirnov statistic.
fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

fn corruption_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    // Features with differently shaped marginals, including a discrete one.
    let x = Matrix::from_vec(
        CORRUPT_ROWS,
        CORRUPT_WIDTH,
        (0..CORRUPT_ROWS * CORRUPT_WIDTH)
            .map(|k| match k % CORRUPT_WIDTH % 4 {
                0 => rng.gen::<f64>(),
                1 => rng.gen::<f64>().powi(3),
                2 => (rng.gen_range(0..5) as f64) / 4.0,
                _ => 1.0 - rng.gen::<f64>().sqrt(),
            })
            .collect(),
    );
    let mg = fit_marginals(&x).unwrap();
    let cc = CorruptionConfig { ratio: CORRUPT_RATIO, seed: 303, ..CorruptionConfig::default() };
    let (c, mask) = corrupt(&x, &mg, &cc, &mut rng).unwrap();
    let t = (CORRUPT_RATIO * CORRUPT_WIDTH as f64).round() as usize;
    let sums_ok = (0..CORRUPT_ROWS).all(|i| mask.row_sum(i) == t);
    let mut untouched_ok = true;
    let mut replaced: Vec<Vec<f64>> = vec![Vec::new(); CORRUPT_WIDTH];
    for i in 0..CORRUPT_ROWS {
        for j in 0..CORRUPT_WIDTH {
            if mask.get(i, j) {
                replaced[j].push(c.get(i, j));
            } else {
                untouched_ok &= c.get(i, j).to_bits() == x.get(i, j).to_bits();
            }
        }
    }
    let mut worst_ratio = 0.0f64;
    let mut ks_fail = 0;
    for (j, r) in replaced.iter().enumerate() {
        let pool = mg.pool(j);
        let (n, m) = (r.len() as f64, pool.len() as f64);
        let critical = KS_C_ALPHA * ((n + m) / (n * m)).sqrt();
        let d = ks_statistic(r, pool);
        worst_ratio = worst_ratio.max(d / critical);
        if d >= critical {
            ks_fail += 1;
        }
    }
    outcome(
        sums_ok && untouched_ok && ks_fail == 0,
        format!(
            "{CORRUPT_ROWS} rows × {CORRUPT_WIDTH}: every mask row sums to {t}: {sums_ok}; unmasked bit-identical: {untouched_ok}; KS at 1%: {ks_fail}/{CORRUPT_WIDTH} features reject, max D/D_crit {worst_ratio:.3}"
        ),
    )
}

// ---- 4 --------------------------------------------------------------------

/// Runs `cfg` from scratch, writing a loss log and one checkpoint per epoch.
fn logged_run(data: &TableDataset, cfg: TrainConfig, dir: &std::path::Path) -> (Vec<LossReport>, Vec<Vec<u8>>) {
    let mut log = LossLogWriter::open(&dir.join("loss_log.csv"), false).unwrap();
    let mut checkpoints = Vec::new();
    let t = Instant::now();
    let mut tr = Pretrainer::new(data, cfg).unwrap();
    tr.run(|state, infos| {
        for i in infos {
            log.write(&i.report, t.elapsed().as_millis()).unwrap();
        }
        checkpoints.push(Checkpoint::from_train_state(state, &cfg, None).to_bytes().unwrap());
    })
    .unwrap();
    log.flush().unwrap();
    drop(log);
    (read_loss_log(&dir.join("loss_log.csv")).unwrap(), checkpoints)
}

fn determinism() -> Outcome {
    let spec = SyntheticSpec { n_samples: 500, ..SyntheticSpec::default() };
    let data = scaled_splits(&redundant_clusters(&spec, 11), (0.8, 0.1, 0.1), 11).unwrap().train;
    let cfg = TrainConfig { epochs: 6, seed: 404, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let (a_dir, b_dir) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::create_dir_all(&a_dir).unwrap();
    std::fs::create_dir_all(&b_dir).unwrap();
    let (log_a, ck_a) = logged_run(&data, cfg, &a_dir);
    let (log_b, ck_b) = logged_run(&data, cfg, &b_dir);
    let logs_equal = log_a.len() == log_b.len() && log_a.iter().zip(&log_b).all(|(x, y)| x.bit_eq(y));
    let cks_equal = ck_a == ck_b;

    // Resume from the serialized midpoint checkpoint.
    let mid = cfg.epochs / 2;
    let (state, saved_cfg) = Checkpoint::from_bytes(&ck_a[mid - 1]).unwrap().train_state().unwrap();
    let mut tail_log = Vec::new();
    let mut tail_cks = Vec::new();
    let mut tr = Pretrainer::resume(&data, saved_cfg, state).unwrap();
    tr.run(|s, infos| {
        tail_log.extend(infos.iter().map(|i| i.report));
        tail_cks.push(Checkpoint::from_train_state(s, &saved_cfg, None).to_bytes().unwrap());
    })
    .unwrap();
    let k = log_a.len() - tail_log.len();
    let tail_equal = tail_log.len() * cfg.epochs == log_a.len() * (cfg.epochs - mid)
        && log_a[k..].iter().zip(&tail_log).all(|(x, y)| x.bit_eq(y))
        && tail_cks[..] == ck_a[mid..];
    outcome(
        logs_equal && cks_equal && tail_equal,
        format!(
            "{} steps over {} epochs: loss logs identical {logs_equal}, {} checkpoints identical {cks_equal}; resume from epoch {mid} reproduces the remaining {} steps and checkpoints: {tail_equal}",
            log_a.len(),
            cfg.epochs,
            ck_a.len(),
            tail_log.len()
        ),
    )
}

// ---- 5, 6, 7 --------------------------------------------------------------

fn synthetic_splits() -> Splits {
    scaled_splits(&redundant_clusters(&SyntheticSpec::default(), SYN_SEED), SPLIT, SYN_SEED).unwrap()
}

fn base_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, seed: SYN_SEED, ..TrainConfig::default() }
}

fn end_to_end() -> Outcome {
    let t = Instant::now();
    let s = synthetic_splits();
    let cfg = base_config(E2E_EPOCHS);
    let pre = pretrain_semi(&s.train, cfg).unwrap();
    let ft = finetune(&pre.state.params, &s.train, &FinetuneConfig::from_train(&cfg, E2E_FINETUNE_EPOCHS)).unwrap();
    let ctx = ReportContext { dataset: "synthetic", method: "recontab", feature_mode: FeatureMode::Raw };
    let tuned = report_from_scores(&ctx, &ft.predict_proba(&s.test.x).unwrap(), &s.test, None).unwrap().value;
    let lc = LogisticConfig::default();
    let raw = logistic_regression(&s.train, &s.test, &lc, &ctx).unwrap().value;
    let (tr, te) = plug_and_play_features(&pre.state.params, &s.train, &s.test, FeatureMode::Concat).unwrap();
    let concat = logistic_regression(&tr, &te, &lc, &ctx).unwrap().value;
    let elapsed = t.elapsed();
    let pass = tuned >= E2E_MIN_AUROC && concat >= raw - E2E_CONCAT_SLACK;
    outcome(
        pass,
        format!(
            "{E2E_EPOCHS} pretraining + {E2E_FINETUNE_EPOCHS} fine-tuning epochs: fine-tuned test AUROC {tuned:.4} (need ≥ {E2E_MIN_AUROC}); concat LR {concat:.4} vs raw LR {raw:.4} (need ≥ raw − {E2E_CONCAT_SLACK}); {:.0}s (target < {}s{})",
            elapsed.as_secs_f64(),
            E2E_BUDGET.as_secs(),
            if elapsed < E2E_BUDGET { "" } else { ", exceeded" }
        ),
    )
}

fn regularization() -> Outcome {
    let s = synthetic_splits();
    let spec = SyntheticSpec::default();
    let [informative, _, noise] = spec.blocks();
    let weights = |loss: LossConfig| {
        let cfg = TrainConfig { loss, ..base_config(REG_EPOCHS) };
        pretrain_semi(&s.train, cfg).unwrap().state.params.input_weights().to_vec()
    };
    let norm = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mean_abs = |w: &[f64]| w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
    let w0 = weights(LossConfig { lambda: 0.0, ..LossConfig::default() });
    let w1 = weights(LossConfig { lambda: 1.0, ..LossConfig::default() });
    // L1 with the default penalty strength.
    let wl1 = weights(LossConfig { p: PenaltyNorm::L1, ..LossConfig::default() });
    let (n0, n1) = (norm(&w0), norm(&w1));
    let (inf, noi) = (mean_abs(&wl1[informative]), mean_abs(&wl1[noise]));
    outcome(
        n1 < n0 && noi < inf,
        format!(
            "{REG_EPOCHS} epochs: ‖W‖₂ λ=1 {n1:.6} vs λ=0 {n0:.6}; p=1 (λ={}): mean |W| noise {noi:.6} vs informative {inf:.6}",
            LossConfig::default().lambda
        ),
    )
}

fn ablation() -> Outcome {
    let s = synthetic_splits();
    let template = base_config(ABLATION_EPOCHS);
    let cfg = AblationConfig {
        template,
        finetune: FinetuneConfig::from_train(&template, ABLATION_FINETUNE_EPOCHS),
        metric: AblationMetric::Finetune,
        logistic: LogisticConfig::default(),
        use_validation: false,
    };
    let table = ablation_runner(&[("synthetic", &s)], &ABLATION_RATIOS, &cfg, |_, _, _| {}).unwrap();
    let rendered = render_table2(&table);
    for line in rendered.lines() {
        println!("    {line}");
    }
    let row = &table.rows[0];
    let best = table.ratios[row.best];
    let values: Vec<String> = row.values.iter().map(|v| format!("{v:.4}")).collect();
    outcome(
        best > 0.0 && rendered.contains('*'),
        format!(
            "{ABLATION_EPOCHS} pretraining + {ABLATION_FINETUNE_EPOCHS} fine-tuning epochs per ratio: AUROC [{}]; best ratio {best:.1} (need > 0.0)",
            values.join(", ")
        ),
    )
}

// ---- 8 --------------------------------------------------------------------

fn brute_auroc(s: &[f64], y: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn metric() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < AUROC_SETS {
        let n = rng.gen_range(2..120);
        let levels = rng.gen_range(2..40);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        if !(y.iter().any(|v| *v) && y.iter().any(|v| !*v)) {
            continue;
        }
        worst = worst.max((auroc(&s, &y).unwrap() - brute_auroc(&s, &y)).abs());
        done += 1;
    }
    let example = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    outcome(
        worst < ORACLE_TOL && example == 0.75,
        format!("{AUROC_SETS} random sets with ties: max abs err {worst:.1e} (tol {ORACLE_TOL:.0e}); worked example {example}"),
    )
}

// ---- 9 --------------------------------------------------------------------

fn smoke() -> Outcome {
    // 452 rows, 226 features: a few informative columns buried in copies and noise.
    let spec = SyntheticSpec {
        n_samples: 452,
        n_informative: 10,
        n_copies: 60,
        n_noise: 156,
        separation: 1.0,
        ..SyntheticSpec::default()
    };
    let s = scaled_splits(&redundant_clusters(&spec, 909), SPLIT, 909).unwrap();
    let cfg = TrainConfig { epochs: SMOKE_EPOCHS, seed: 909, ..TrainConfig::default() };
    match pretrain_semi(&s.train, cfg) {
        Err(e) => outcome(false, format!("pretraining failed: {e}")),
        Ok(pre) => {
            let ft = finetune(&pre.state.params, &s.train, &FinetuneConfig::from_train(&cfg, 100)).unwrap();
            let ctx = ReportContext { dataset: "wide", method: "recontab", feature_mode: FeatureMode::Raw };
            let v = report_from_scores(&ctx, &ft.predict_proba(&s.test.x).unwrap(), &s.test, None).unwrap().value;
            outcome(
                v > SMOKE_MIN_AUROC,
                format!("{SMOKE_EPOCHS} epochs without divergence; test AUROC {v:.4} (need > {SMOKE_MIN_AUROC}; reference value {SMOKE_REFERENCE_AUROC} from the full-scale setting)"),
            )
        }
    }
}
