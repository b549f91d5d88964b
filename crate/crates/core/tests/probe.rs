use rand::Rng;
use urbanssl::nn::{Encoder, EncoderConfig, Tensor};
use urbanssl::probe::{
    argmax, evaluate, run_probe, summarize, train_probe, ExtractionMode, FrozenRepresentation, LinearHead, ProbeConfig,
};
use urbanssl::raster::FloatImage;
use urbanssl::seed;

/// `per_class` points around each of `c` well separated centers.
fn clusters(c: usize, per_class: usize, d: usize, noise: f32, s: u64) -> (Tensor<f32>, Vec<usize>) {
    let mut r = seed::substream(s, 0);
    let centers: Vec<Vec<f32>> = (0..c).map(|_| (0..d).map(|_| r.gen_range(-5.0..5.0)).collect()).collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..c * per_class {
        let k = i % c;
        data.extend(centers[k].iter().map(|&v| v + noise * (r.gen::<f32>() - 0.5)));
        labels.push(k);
    }
    (Tensor::new(&[c * per_class, d], data).unwrap(), labels)
}

fn short(epochs: usize) -> ProbeConfig {
    ProbeConfig { epochs, ..ProbeConfig::default() }
}

#[test]
fn separable_clusters_reach_full_training_accuracy() {
    let (x, y) = clusters(4, 50, 8, 0.5, 1);
    let head = train_probe(&x, &y, 4, &short(30), 0).unwrap();
    let r = evaluate(&head, &x, &y, &short(30)).unwrap();
    assert!(r.top1_accuracy >= 0.99, "{}", r.top1_accuracy);
}

#[test]
fn zero_epochs_is_chance() {
    let mut r = seed::substream(2, 0);
    let n = 2000;
    let x = Tensor::from_fn(&[n, 8], |_| r.gen::<f32>() - 0.5);
    let y: Vec<usize> = (0..n).map(|_| r.gen_range(0..4)).collect();
    let head = train_probe(&x, &y, 4, &short(0), 0).unwrap();
    let acc = evaluate(&head, &x, &y, &short(0)).unwrap().top1_accuracy;
    let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
    assert!((acc - 0.25).abs() <= 3.0 * sigma, "{acc}");
}

#[test]
fn lr_schedule_drops_twice() {
    let c = ProbeConfig::default();
    assert_eq!(c.lr_at(0), 30.0);
    assert!((c.lr_at(90) - 0.3).abs() < 1e-12);
    assert!((c.lr_at(70) - 3.0).abs() < 1e-12);
}

#[test]
fn oracle_head_is_perfect() {
    // Class k fires on coordinate k.
    let c = 5;
    let x = Tensor::from_fn(&[c * 3, c], |i| if i / c % c == i % c { 1.0 } else { 0.0 });
    let y: Vec<usize> = (0..c * 3).map(|i| i % c).collect();
    let w = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
    let head = LinearHead::from_weights(w, Tensor::zeros(&[c])).unwrap();
    assert_eq!(evaluate(&head, &x, &y, &ProbeConfig::default()).unwrap().top1_accuracy, 1.0);
}

#[test]
fn permuted_labels_score_at_chance() {
    let (x, mut y) = clusters(20, 200, 16, 0.5, 3);
    let mut r = seed::substream(9, 0);
    for i in (1..y.len()).rev() {
        y.swap(i, r.gen_range(0..=i));
    }
    let (train_x, test_x) = (x.slice_rows(0, 2000), x.slice_rows(2000, 4000));
    let head = train_probe(&train_x, &y[..2000], 20, &short(10), 0).unwrap();
    let acc = evaluate(&head, &test_x, &y[2000..], &short(10)).unwrap().top1_accuracy;
    assert!((acc - 0.05).abs() <= 0.02, "{acc}");
}

#[test]
fn aggregates_match_a_recount() {
    let mut r = seed::substream(4, 0);
    let c = 6;
    let labels: Vec<usize> = (0..500).map(|_| r.gen_range(0..c)).collect();
    let preds: Vec<usize> = labels.iter().map(|&l| if r.gen::<f64>() < 0.6 { l } else { r.gen_range(0..c) }).collect();
    let res = summarize(&preds, &labels, c, &ProbeConfig::default());
    let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    assert_eq!(res.correct, correct);
    assert_eq!(res.top1_accuracy, correct as f64 / 500.0);
    let weighted: f64 =
        res.per_class_accuracy.iter().zip(&res.class_counts).map(|(a, &n)| a * n as f64).sum::<f64>() / 500.0;
    assert!((weighted - res.top1_accuracy).abs() < 1e-12);
    for k in 0..c {
        let n = labels.iter().filter(|&&l| l == k).count();
        assert_eq!(res.class_counts[k], n);
    }
}

#[test]
fn accuracy_ignores_presentation_order() {
    let (x, y) = clusters(3, 40, 4, 6.0, 5);
    let head = train_probe(&x, &y, 3, &short(5), 0).unwrap();
    let a = evaluate(&head, &x, &y, &short(5)).unwrap().top1_accuracy;
    let rev: Vec<usize> = (0..y.len()).rev().collect();
    let xr = Tensor::from_fn(&[y.len(), 4], |k| x.row(rev[k / 4])[k % 4]);
    let yr: Vec<usize> = rev.iter().map(|&i| y[i]).collect();
    assert_eq!(a, evaluate(&head, &xr, &yr, &short(5)).unwrap().top1_accuracy);
}

#[test]
fn ties_go_to_the_lowest_index() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    assert_eq!(argmax(&[2.0, 2.0]), 0);
}

#[test]
fn empty_test_set_is_an_error() {
    let head = LinearHead::from_weights(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2])).unwrap();
    assert!(evaluate(&head, &Tensor::zeros(&[0, 2]), &[], &ProbeConfig::default()).is_err());
}

#[test]
fn concat_mode_width_and_frozen_contract() {
    let enc = Encoder::<f32>::new(EncoderConfig { input_size: 16, ..EncoderConfig::tiny_transformer() }, 1).unwrap();
    let rep = FrozenRepresentation::new(enc, ExtractionMode::ConcatLast4Blocks).unwrap();
    assert_eq!(rep.feature_dim(), 256);
    let img = FloatImage::filled(24, 24, [0.2, 0.5, 0.7]);
    let other = FloatImage::filled(24, 24, [0.9, 0.1, 0.3]);
    let f = rep.extract(&[img.clone(), img.clone(), other.clone()]).unwrap();
    assert_eq!(f.shape(), &[3, 256]);
    assert_eq!(f.row(0), f.row(1));
    let images = vec![img.clone(), other.clone(), img, other];
    let run = run_probe(&rep, (&images, &[0, 1, 0, 1]), (&images, &[0, 1, 0, 1]), 2, &short(3), 0).unwrap();
    assert_eq!(run.checksum_before, run.checksum_after);
    assert_eq!(run.checksum_before, rep.frozen_checksum());

    let conv = Encoder::<f32>::new(EncoderConfig::default(), 1).unwrap();
    assert!(FrozenRepresentation::new(conv, ExtractionMode::ConcatLast4Blocks).is_err());
}

#[test]
fn class_count_mismatch_is_rejected() {
    let (x, y) = clusters(4, 5, 3, 0.5, 6);
    assert!(train_probe(&x, &y, 3, &short(1), 0).is_err());
}
