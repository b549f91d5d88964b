use std::collections::BTreeSet;

use urbanssl::bench::{load_dataset, ExperimentConfig, ExperimentKind};
use urbanssl::contrastive::{
    momentum_update, ContrastiveConfig, ContrastiveState, ContrastiveWorkflow, MomentumPair, ProjectionHead,
};
use urbanssl::nn::{Encoder, EncoderConfig, SgdConfig};
use urbanssl::probe::class_similarity;
use urbanssl::raster::{images_to_tensor, FloatImage};
use urbanssl::seed;
use urbanssl::tiles::{Domain, Split};
use urbanssl::train::median;

fn tiles(n_cities: usize) -> Vec<FloatImage> {
    labeled_tiles(n_cities).0
}

fn labeled_tiles(n_cities: usize) -> (Vec<FloatImage>, Vec<usize>) {
    let mut cfg = ExperimentConfig::desk(ExperimentKind::Generalizability);
    cfg.data.cities = n_cities;
    cfg.data.samples_per_city = 40;
    cfg.pretrain.cities = n_cities;
    let data = load_dataset(&cfg, Domain::Satellite, 5).unwrap();
    let all: BTreeSet<usize> = (0..n_cities).collect();
    let idx = data.bank.select(Split::Train, &all);
    (idx.iter().map(|&i| data.bank.float(i)).collect(), idx.iter().map(|&i| data.bank.labels[i]).collect())
}

fn config(workflow: ContrastiveWorkflow, queue: usize, batch: usize) -> ContrastiveConfig {
    ContrastiveConfig {
        queue_size: queue,
        optimizer: SgdConfig { batch_size: batch, ..SgdConfig::default() },
        steps: 200,
        ..ContrastiveConfig::for_workflow(workflow)
    }
}

fn batch(pool: &[FloatImage], b: usize, step: usize) -> Vec<FloatImage> {
    let mut r = seed::rng(3, "batches", step as u64);
    urbanssl::contrastive::sample_batch(pool.len(), b, &mut r).into_iter().map(|i| pool[i].clone()).collect()
}

#[test]
fn initial_loss_is_near_uniform() {
    let pool = tiles(4);
    for w in [ContrastiveWorkflow::V1, ContrastiveWorkflow::V2] {
        let cfg = config(w, 256, 32);
        let mut state = ContrastiveState::new(cfg, 0).unwrap();
        for i in 0..state.config.warmup_batches() {
            state.warmup_batch(&batch(&pool, 32, 1000 + i), i).unwrap();
        }
        assert!(state.queue.is_full());
        let rec = state.train_step(&batch(&pool, 32, 0)).unwrap();
        let uniform = 257f64.ln();
        assert!((0.5 * uniform..=1.5 * uniform).contains(&rec.loss), "{w:?}: {} vs ln 257 = {uniform}", rec.loss);
    }
}

#[test]
fn training_lowers_the_loss_and_separates_cities() {
    let (pool, labels) = labeled_tiles(8);
    let cfg = ContrastiveConfig { steps: 200, ..ContrastiveConfig::for_workflow(ContrastiveWorkflow::V2) };
    let b = cfg.optimizer.batch_size;
    let mut state = ContrastiveState::new(cfg, 1).unwrap();
    for i in 0..state.config.warmup_batches() {
        state.warmup_batch(&batch(&pool, b, 1000 + i), i).unwrap();
    }
    let losses: Vec<f64> = (0..200).map(|s| state.train_step(&batch(&pool, b, s)).unwrap().loss).collect();
    assert!(state.pair.key_grads_all_zero());
    let (early, late) = (median(&losses[..50]), median(&losses[150..]));
    assert!(late < early, "loss median went from {early} to {late}");

    let emb = state.encoder().embed(&images_to_tensor(&pool).unwrap()).unwrap();
    let (within, between) = class_similarity(&emb, &labels);
    assert!(within > between, "within {within} <= between {between}");
}

#[test]
fn momentum_extremes() {
    let enc = Encoder::<f32>::new(EncoderConfig::default(), 2).unwrap();
    let head = ProjectionHead::mlp(128, 64, &mut seed::rng(2, "head", 0));
    let mut pair = MomentumPair::new(enc, head, 1.0).unwrap();
    let frozen = pair.key.params().checksum();
    for p in pair.query.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.5;
        }
    }
    momentum_update(&mut pair).unwrap();
    assert_eq!(pair.key.params().checksum(), frozen);
    pair.momentum = 0.0;
    momentum_update(&mut pair).unwrap();
    assert_eq!(pair.key.params().checksum(), pair.query.params().checksum());
    assert!(MomentumPair::new(pair.query.clone(), ProjectionHead::Identity, 1.5).is_err());
}

#[test]
fn queue_size_must_be_a_batch_multiple() {
    assert!(ContrastiveState::new(config(ContrastiveWorkflow::V1, 100, 32), 0).is_err());
    assert!(ContrastiveState::new(config(ContrastiveWorkflow::V1, 128, 32), 0).is_ok());
}

#[test]
fn runs_are_deterministic() {
    let pool = tiles(2);
    let run = || {
        let mut state = ContrastiveState::new(config(ContrastiveWorkflow::V1, 32, 8), 4).unwrap();
        for i in 0..state.config.warmup_batches() {
            state.warmup_batch(&batch(&pool, 8, 1000 + i), i).unwrap();
        }
        let l: Vec<f64> = (0..5).map(|s| state.train_step(&batch(&pool, 8, s)).unwrap().loss).collect();
        (l, state.encoder().params().checksum())
    };
    assert_eq!(run(), run());
}
