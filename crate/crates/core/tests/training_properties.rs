//! Behavioural properties of pretraining and fine-tuning on small runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recontab_core::corruption::{corrupt, fit_marginals, CorruptionConfig};
use recontab_core::data::TableDataset;
use recontab_core::losses::LossConfig;
use recontab_core::model::{ModelHyper, ModelParameters};
use recontab_core::synthetic::{redundant_clusters, scaled_splits, SyntheticSpec};
use recontab_core::training::{
    batch_objective, finetune, pretrain_semi, FinetuneConfig, PreparedBatch, Pretrainer, TrainConfig, TrainMode,
    TwoBatches,
};

fn small_data(n: usize, seed: u64) -> TableDataset {
    let spec = SyntheticSpec { n_samples: n, n_informative: 2, n_copies: 3, n_noise: 3, ..SyntheticSpec::default() };
    scaled_splits(&redundant_clusters(&spec, seed), (0.8, 0.1, 0.1), seed).unwrap().train
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        epochs: 6,
        learning_rate: 3e-3,
        seed: 13,
        model: ModelHyper { token_dim: 8, n_layers: 2, n_heads: 2, ..ModelHyper::default() },
        ..TrainConfig::default()
    }
}

fn epoch_means(log: &[recontab_core::losses::LossReport], per_epoch: usize) -> Vec<f64> {
    log.chunks(per_epoch).map(|c| c.iter().map(|r| r.total).sum::<f64>() / c.len() as f64).collect()
}

#[test]
fn pretraining_reduces_the_objective() {
    let data = small_data(300, 1);
    let cfg = small_config();
    let mut tr = Pretrainer::new(&data, cfg).unwrap();
    let per = tr.steps_per_epoch();
    let log = tr.run(|_, _| {}).unwrap();
    let means = epoch_means(&log, per);
    assert_eq!(means.len(), cfg.epochs);
    assert!(means[cfg.epochs - 1] < means[0], "epoch means {means:?}");
    assert!(tr.state().params.is_finite());
}

#[test]
fn same_seed_is_bit_identical_and_resume_reproduces_the_tail() {
    let data = small_data(120, 2);
    let cfg = TrainConfig { epochs: 4, ..small_config() };
    let a = pretrain_semi(&data, cfg).unwrap();
    let b = pretrain_semi(&data, cfg).unwrap();
    assert!(a.log.iter().zip(&b.log).all(|(x, y)| x.bit_eq(y)));
    assert_eq!(a.state, b.state);

    let mut first = Pretrainer::new(&data, TrainConfig { epochs: 2, ..cfg }).unwrap();
    first.run(|_, _| {}).unwrap();
    let mid = first.into_state();
    let mut second = Pretrainer::resume(&data, cfg, mid).unwrap();
    let tail = second.run(|_, _| {}).unwrap();
    let k = a.log.len() - tail.len();
    assert!(a.log[k..].iter().zip(&tail).all(|(x, y)| x.bit_eq(y)));
    assert_eq!(second.into_state(), a.state);

    let other = pretrain_semi(&data, TrainConfig { seed: 14, ..cfg }).unwrap();
    assert_ne!(other.state.params, a.state.params);
}

/// Every parameter group that the objective depends on receives gradient
/// signal; groups outside the objective receive none.
#[test]
fn gradient_reaches_every_trained_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data = small_data(60, 4);
    let hyper = ModelHyper { token_dim: 4, n_layers: 2, n_heads: 2, ..ModelHyper::default() };
    let params = ModelParameters::init(hyper.resolve(data.n_features(), 2), &mut rng).unwrap();
    let batches = TwoBatches { first: (0..8).collect(), second: (8..16).collect(), shrunk: false };
    let mg = fit_marginals(&data.x).unwrap();
    let cc = CorruptionConfig { ratio: 0.3, ..CorruptionConfig::default() };
    let c1 = corrupt(&data.x.select_rows(&batches.first), &mg, &cc, &mut rng).unwrap().0;
    let c2 = corrupt(&data.x.select_rows(&batches.second), &mg, &cc, &mut rng).unwrap().0;
    let batch = PreparedBatch::new(&data, &batches, [c1, c2]);

    for mode in [TrainMode::SelfSupervised, TrainMode::SemiSupervised] {
        let g = batch_objective(&params, &batch, &LossConfig::default(), mode, true).unwrap().grads.unwrap();
        for spec in params.layout().specs() {
            let mag = spec.span.of(&g).iter().map(|v| v.abs()).fold(0.0, f64::max);
            let is_head = spec.name.starts_with("finetune_head");
            let is_classifier = spec.name.starts_with("classifier");
            // Softmax is invariant to the key bias, so its gradient is exactly
            // zero; the last block only computes the summary row's query.
            let structurally_zero = spec.name.ends_with("attn.k.bias");
            let expect_zero = is_head || structurally_zero || (mode == TrainMode::SelfSupervised && is_classifier);
            if expect_zero {
                assert!(mag < 1e-12, "{mode:?}: `{}` should get no gradient, max {mag}", spec.name);
            } else {
                assert!(mag > 0.0, "{mode:?}: `{}` gets no gradient", spec.name);
            }
        }
    }
}

/// Label-dependent terms only see rows that carry labels: dropping the
/// unlabeled pairs leaves the classification and contrastive terms unchanged.
#[test]
fn half_labeled_batches_mask_label_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut data = small_data(60, 5);
    let n = data.n_samples();
    let ys = data.y.as_mut().unwrap();
    let unlabeled: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
    for &i in &unlabeled {
        ys[i] = None;
    }
    let hyper = ModelHyper { token_dim: 4, n_layers: 1, n_heads: 2, ..ModelHyper::default() };
    let params = ModelParameters::init(hyper.resolve(data.n_features(), 2), &mut rng).unwrap();
    let first: Vec<usize> = (0..12).collect();
    let second: Vec<usize> = (12..24).collect();
    let x = |idx: &[usize]| data.x.select_rows(idx);
    let full = PreparedBatch::new(&data, &TwoBatches { first: first.clone(), second: second.clone(), shrunk: false }, [x(&first), x(&second)]);
    let keep: Vec<usize> = (0..12).filter(|&k| data.label(first[k]).is_some() && data.label(second[k]).is_some()).collect();
    assert!(!keep.is_empty() && keep.len() < 12);
    let f2: Vec<usize> = keep.iter().map(|&k| first[k]).collect();
    let s2: Vec<usize> = keep.iter().map(|&k| second[k]).collect();
    // The sub-batch keeps only pairs labeled on both sides.
    let sub = PreparedBatch::new(&data, &TwoBatches { first: f2.clone(), second: s2.clone(), shrunk: false }, [x(&f2), x(&s2)]);
    let loss = LossConfig::default();
    let a = batch_objective(&params, &full, &loss, TrainMode::SemiSupervised, false).unwrap().report;
    let b = batch_objective(&params, &sub, &loss, TrainMode::SemiSupervised, false).unwrap().report;
    assert!((a.contrastive - b.contrastive).abs() < 1e-12);

    // Rows labeled in only one branch still count for that branch's
    // classification term, so unlabel them in both branches before comparing.
    let mut paired = full.clone();
    for k in 0..12 {
        if !keep.contains(&k) {
            paired.labels[0][k] = None;
            paired.labels[1][k] = None;
        }
    }
    let c = batch_objective(&params, &paired, &loss, TrainMode::SemiSupervised, false).unwrap().report;
    assert!((c.classification - b.classification).abs() < 1e-12);
    assert!((c.contrastive - b.contrastive).abs() < 1e-12);
    // Reconstruction uses every row regardless of labels.
    assert_eq!(c.reconstruction.to_bits(), a.reconstruction.to_bits());

    let out = pretrain_semi(&data, TrainConfig { epochs: 2, ..small_config() }).unwrap();
    assert!(out.log.iter().all(|r| r.total.is_finite()));
}

#[test]
fn end_to_end_finetuning_fits_at_least_as_well_as_a_frozen_probe() {
    let data = small_data(200, 6);
    let cfg = small_config();
    let pre = pretrain_semi(&data, TrainConfig { epochs: 3, ..cfg }).unwrap();
    let ft = FinetuneConfig { learning_rate: 3e-3, ..FinetuneConfig::from_train(&cfg, 15) };
    let full = finetune(&pre.state.params, &data, &ft).unwrap();
    let probe = finetune(&pre.state.params, &data, &FinetuneConfig { freeze_encoder: true, ..ft }).unwrap();
    let (a, b) = (full.mean_cross_entropy(&data).unwrap(), probe.mean_cross_entropy(&data).unwrap());
    assert!(a <= b, "fine-tuned CE {a} > probe CE {b}");
    // The frozen probe leaves every encoder parameter untouched.
    let enc = pre.state.params.layout().input_weights();
    assert_eq!(enc.of(probe.params().values()), enc.of(pre.state.params.values()));
    assert_ne!(enc.of(full.params().values()), enc.of(pre.state.params.values()));
}

#[test]
fn stronger_penalty_gives_smaller_input_weights() {
    let data = small_data(200, 7);
    let run = |lambda: f64| {
        let cfg = TrainConfig { loss: LossConfig { lambda, ..LossConfig::default() }, ..small_config() };
        let w = pretrain_semi(&data, cfg).unwrap().state.params.input_weights().to_vec();
        w.iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let (none, strong) = (run(0.0), run(1.0));
    assert!(strong < none, "‖W‖ with penalty {strong} vs without {none}");
}
