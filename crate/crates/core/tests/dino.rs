use std::collections::BTreeSet;

use rand::Rng;
use urbanssl::bench::{load_dataset, ExperimentConfig, ExperimentKind};
use urbanssl::dino::{center_update, dino_loss, mean_entropy, teacher_distribution, DinoConfig, DistillationState};
use urbanssl::nn::{Graph, Tensor};
use urbanssl::probe::class_similarity;
use urbanssl::raster::{images_to_tensor, FloatImage};
use urbanssl::seed;
use urbanssl::tiles::{Domain, Split};

fn random_logits(r: &mut impl Rng, rows: usize, p: usize, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(&[rows, p], |_| scale * (r.gen::<f64>() * 2.0 - 1.0))
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Scalar-loop cross-entropy over (teacher crop, other student crop) pairs.
fn oracle_loss(student: &[Tensor<f64>], teacher: &[Tensor<f64>], tau_s: f64) -> f64 {
    let b = teacher[0].rows();
    let mut total = 0.0;
    let mut pairs = 0;
    for (gi, t) in teacher.iter().enumerate() {
        for (vi, s) in student.iter().enumerate() {
            if vi == gi {
                continue;
            }
            let mut ce = 0.0;
            for i in 0..b {
                let z: Vec<f64> = s.row(i).iter().map(|v| v / tau_s).collect();
                let p = softmax(&z);
                for (pt, ps) in t.row(i).iter().zip(&p) {
                    ce -= pt * ps.ln();
                }
            }
            total += ce / b as f64;
            pairs += 1;
        }
    }
    total / pairs as f64
}

fn bound_loss(student: &[Tensor<f64>], teacher: &[Tensor<f64>], tau_s: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<_> = student.iter().map(|s| g.variable(s.clone())).collect();
    let l = dino_loss(&mut g, &vars, teacher, tau_s).unwrap();
    g.value(l).item()
}

#[test]
fn teacher_distributions_sum_to_one() {
    let mut r = seed::substream(1, 0);
    for _ in 0..1000 {
        let p = r.gen_range(2..40);
        let scale = r.gen_range(0.1..50.0);
        let logits = random_logits(&mut r, 3, p, scale);
        let center: Vec<f64> = (0..p).map(|_| r.gen_range(-5.0..5.0)).collect();
        let probs = teacher_distribution(&logits, &center, r.gen_range(0.005..1.0)).unwrap();
        for i in 0..3 {
            let row = probs.row(i);
            assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn loss_matches_the_scalar_oracle() {
    let mut r = seed::substream(2, 0);
    for _ in 0..200 {
        let (b, p, tau_s) = (r.gen_range(1..5), 8, r.gen_range(0.05..0.5));
        let student: Vec<Tensor<f64>> = (0..4).map(|_| random_logits(&mut r, b, p, 3.0)).collect();
        let teacher: Vec<Tensor<f64>> = (0..2)
            .map(|_| teacher_distribution(&random_logits(&mut r, b, p, 3.0), &[0.0; 8], 0.04).unwrap())
            .collect();
        let got = bound_loss(&student, &teacher, tau_s);
        let want = oracle_loss(&student, &teacher, tau_s);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn matching_student_attains_the_entropy_bound() {
    let mut r = seed::substream(3, 0);
    let tau_s = 0.1;
    let logits = random_logits(&mut r, 4, 6, 1.0);
    let teacher = teacher_distribution(&logits, &[0.0; 6], tau_s).unwrap();
    // Every crop carries the same logits, so every pair has p_s = p_t.
    let student = vec![logits.clone(), logits.clone(), logits];
    let loss = bound_loss(&student, &[teacher.clone(), teacher.clone()], tau_s);
    assert!((loss - mean_entropy(&teacher)).abs() < 1e-9);

    for _ in 0..100 {
        let student: Vec<Tensor<f64>> = (0..3).map(|_| random_logits(&mut r, 4, 6, 2.0)).collect();
        let t: Vec<Tensor<f64>> =
            (0..2).map(|_| teacher_distribution(&random_logits(&mut r, 4, 6, 2.0), &[0.0; 6], 0.04).unwrap()).collect();
        let h = t.iter().map(mean_entropy).sum::<f64>() / 2.0;
        assert!(bound_loss(&student, &t, tau_s) >= h - 1e-12);
    }
}

#[test]
fn uniform_teacher_loss() {
    let mut r = seed::substream(4, 0);
    let student: Vec<Tensor<f64>> = (0..2).map(|_| random_logits(&mut r, 1, 4, 2.0)).collect();
    let uniform = Tensor::full(&[1, 4], 0.25);
    let got = bound_loss(&student, &[uniform.clone(), uniform], 1.0);
    let want = student
        .iter()
        .map(|s| -0.25 * softmax(s.row(0)).iter().map(|p| p.ln()).sum::<f64>())
        .sum::<f64>()
        / 2.0;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn center_converges_to_constant_logits() {
    let logits = Tensor::new(&[3, 2], vec![2.0f32, -1.0, 2.0, -1.0, 2.0, -1.0]).unwrap();
    let mut c = vec![0.0f32; 2];
    for t in 1..=50 {
        center_update(&mut c, &logits, 0.9).unwrap();
        let gap = 2.0 * 0.9f64.powi(t);
        assert!((2.0 - c[0] as f64 - gap).abs() < 1e-4);
    }
}

fn tiles(n_cities: usize) -> (Vec<FloatImage>, Vec<usize>) {
    let mut cfg = ExperimentConfig::desk(ExperimentKind::Abstraction);
    cfg.data.cities = n_cities;
    cfg.data.samples_per_city = 30;
    cfg.data.tile_px = 32;
    cfg.pretrain.cities = n_cities;
    let data = load_dataset(&cfg, Domain::Satellite, 6).unwrap();
    let idx = data.bank.select(Split::Train, &(0..n_cities).collect::<BTreeSet<_>>());
    (idx.iter().map(|&i| data.bank.float(i)).collect(), idx.iter().map(|&i| data.bank.labels[i]).collect())
}

fn config(steps: usize, batch: usize) -> DinoConfig {
    let mut cfg = ExperimentConfig::desk(ExperimentKind::Abstraction);
    cfg.pretrain.dino_steps = Some(steps);
    cfg.pretrain.batch_size = batch;
    cfg.pretrain.dino_out_dim = 256;
    cfg.dino_config()
}

fn batch(pool: &[FloatImage], b: usize, step: usize) -> Vec<FloatImage> {
    let mut r = seed::rng(5, "dino_batches", step as u64);
    (0..b).map(|_| pool[r.gen_range(0..pool.len())].clone()).collect()
}

#[test]
fn frozen_teacher_and_center() {
    let (pool, _) = tiles(2);
    let mut cfg = config(3, 4);
    cfg.teacher_momentum = 1.0;
    cfg.center_momentum = 1.0;
    let mut state = DistillationState::new(cfg, 0).unwrap();
    state.center.iter_mut().enumerate().for_each(|(i, c)| *c = i as f32 * 0.01);
    let (teacher, center) = (state.teacher.params().checksum(), state.center.clone());
    let student = state.student.params().checksum();
    for s in 0..3 {
        state.distill_step(&batch(&pool, 4, s)).unwrap();
        assert!(state.teacher_grads_all_zero());
    }
    assert_eq!(state.teacher.params().checksum(), teacher);
    assert_eq!(state.center, center);
    assert_ne!(state.student.params().checksum(), student);
}

#[test]
fn uncentered_sharp_teacher_collapses() {
    let (pool, _) = tiles(4);
    let run = |centering: bool| {
        let mut cfg = config(100, 8);
        cfg.centering = centering;
        cfg.teacher_temperature = 0.01;
        let mut state = DistillationState::new(cfg, 2).unwrap();
        (0..100).map(|s| state.distill_step(&batch(&pool, 8, s)).unwrap().teacher_entropy).collect::<Vec<f64>>()
    };
    let off = run(false);
    let blocks: Vec<f64> = off.chunks(20).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(blocks[1..].iter().all(|&b| b < blocks[0]), "entropy by block {blocks:?}");
    assert!(blocks[4] < 0.5 * blocks[0], "entropy by block {blocks:?}");
    let on = run(true);
    let tail = |v: &[f64]| v[80..].iter().sum::<f64>() / 20.0;
    assert!(tail(&on) > tail(&off), "centered {} vs uncentered {}", tail(&on), tail(&off));
}

#[test]
fn distillation_separates_cities() {
    let (pool, labels) = tiles(8);
    let mut state = DistillationState::new(config(200, 16), 3).unwrap();
    for s in 0..200 {
        let rec = state.distill_step(&batch(&pool, 16, s)).unwrap();
        assert!(rec.record.loss.is_finite());
    }
    assert!(state.teacher_grads_all_zero());
    let emb = state.student.embed(&images_to_tensor(&pool).unwrap()).unwrap();
    let (within, between) = class_similarity(&emb, &labels);
    assert!(within > between, "within {within} <= between {between}");
}
