use std::collections::BTreeSet;

use urbanssl::bench::{
    choose_classes, domain_gap_table, gap_inputs, load_dataset, pretrain, read_report_csv, run_abstraction,
    run_generalizability, train_supervised, write_report_csv, ExperimentConfig, ExperimentKind, GapInput,
    PretrainLoader, Workflow,
};
use urbanssl::tiles::{Domain, Split};
use urbanssl::Error;

fn tiny(kind: ExperimentKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(kind);
    cfg.data.cities = 4;
    cfg.data.samples_per_city = 20;
    cfg.data.tile_px = 32;
    cfg.pretrain.cities = if kind == ExperimentKind::Generalizability { 2 } else { 4 };
    cfg.pretrain.steps = 20;
    cfg.pretrain.batch_size = 8;
    cfg.pretrain.queue_size = 32;
    cfg.probe.epochs = 10;
    cfg
}

fn gap(method: &str, s: Option<f64>, m: Option<f64>) -> GapInput {
    GapInput { method: method.into(), satellite: s, map: m }
}

#[test]
fn gap_table_reference_rows() {
    let rows = domain_gap_table(&[
        gap("supervised", Some(99.0), Some(86.0)),
        gap("self-supervised", Some(98.0), Some(67.0)),
        gap("tie", Some(50.0), Some(50.0)),
    ])
    .unwrap();
    assert_eq!(rows[0].difference(), 13.0);
    assert_eq!(rows[1].difference(), 31.0);
    assert_eq!(rows[2].difference(), 0.0);
}

#[test]
fn missing_gap_cell_is_incomplete() {
    let err = domain_gap_table(&[gap("v2", Some(90.0), None)]).unwrap_err();
    assert!(matches!(err, Error::IncompleteResults(_)));
}

#[test]
fn holdout_requires_a_strict_subset() {
    let mut cfg = tiny(ExperimentKind::Generalizability);
    cfg.pretrain.cities = 4;
    assert!(matches!(run_generalizability(&cfg, None), Err(Error::Config(_))));
    cfg.pretrain.cities = 5;
    assert!(cfg.validate().is_err());
}

#[test]
fn abstraction_needs_map_tiles() {
    let mut cfg = tiny(ExperimentKind::Abstraction);
    cfg.domain = Domain::Satellite;
    assert!(cfg.validate().is_err());
}

#[test]
fn config_parses_and_rejects_unknown_keys() {
    let text = r#"
experiment = "abstraction"
domain = "map"
workflows = ["v1", "v2"]
seeds = [3, 4]

[pretrain]
cities = 10
steps = 50
"#;
    let cfg = ExperimentConfig::from_toml(text).unwrap();
    assert_eq!(cfg.workflows, vec![Workflow::V1, Workflow::V2]);
    assert_eq!(cfg.seeds, vec![3, 4]);
    assert_eq!(cfg.pretrain.steps, 50);
    assert_eq!(cfg.data.samples_per_city, 200);
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    assert!(ExperimentConfig::from_toml(&format!("{text}\nlearning_rate = 3")).is_err());
    assert!(ExperimentConfig::from_toml(&text.replace("\"v1\"", "\"v3\"")).is_err());
}

#[test]
fn loader_never_serves_holdout_tiles() {
    let cfg = tiny(ExperimentKind::Generalizability);
    let data = load_dataset(&cfg, Domain::Satellite, 0).unwrap();
    let allowed = choose_classes(4, 2, 0).unwrap();
    let mut loader = PretrainLoader::new(&data.bank, allowed.clone(), 0).unwrap();
    assert_eq!(loader.pool_size(), 2 * 16);
    for _ in 0..50 {
        loader.next_batch(8).unwrap();
    }
    assert_eq!(loader.total_served(), 400);
    assert_eq!(loader.holdout_served(), 0);
    assert!(loader.served().keys().all(|c| allowed.contains(c)));
    assert!(data.bank.select(Split::Train, &allowed).iter().all(|&i| allowed.contains(&data.bank.labels[i])));
}

#[test]
fn generalizability_rows_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ExperimentKind::Generalizability);
    let report = run_generalizability(&cfg, Some(dir.path())).unwrap();
    assert_eq!(report.rows.len(), 2 * cfg.workflows.len());
    for pair in report.rows.chunks(2) {
        assert_eq!((pair[0].test_cities, pair[0].unseen_cities), (2, 0));
        assert_eq!((pair[1].test_cities, pair[1].unseen_cities), (4, 2));
        assert!(pair.iter().all(|r| r.holdout_tiles == 0 && r.frozen_ok));
    }
    let base = dir.path().join("generalizability");
    assert_eq!(read_report_csv(&base.join("report.csv")).unwrap(), report.rows);
    for f in ["v2/satellite/report.csv", "v2/satellite/seed-0/loss.csv", "v2/satellite/seed-0/checkpoint.bin"] {
        assert!(base.join(f).is_file(), "{f}");
    }
    let ckpt = urbanssl::bench::load_encoder(&base.join("v2/satellite/seed-0/checkpoint.bin")).unwrap();
    assert_eq!(ckpt.config().input_size, cfg.pretrain.input_size);
    assert!(std::fs::read_to_string(base.join("report.md")).unwrap().contains("| generalizability | satellite | v2 |"));
}

#[test]
fn abstraction_has_one_row_per_workflow() {
    let cfg = tiny(ExperimentKind::Abstraction);
    let report = run_abstraction(&cfg, None).unwrap();
    assert_eq!(report.rows.len(), cfg.workflows.len());
    assert!(report.rows.iter().all(|r| r.domain == Domain::Map && r.unseen_cities == 0));
}

#[test]
fn report_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ExperimentKind::Abstraction);
    let report = run_abstraction(&cfg, None).unwrap();
    let path = dir.path().join("r.csv");
    write_report_csv(&path, &report.rows).unwrap();
    assert_eq!(read_report_csv(&path).unwrap(), report.rows);
    assert!(read_report_csv(&dir.path().join("missing.csv")).is_err());
}

#[test]
fn gap_means_are_recomputed_from_rows() {
    let cfg = tiny(ExperimentKind::DomainGap);
    let mut rows = Vec::new();
    for domain in Domain::ALL {
        let mut c = cfg.clone();
        c.experiment = ExperimentKind::Abstraction;
        c.domain = Domain::Map;
        let mut r = run_abstraction(&c, None).unwrap().rows;
        for row in &mut r {
            row.domain = domain;
            row.top1 = if domain == Domain::Satellite { 0.75 } else { 0.5 };
        }
        rows.extend(r);
    }
    let table = domain_gap_table(&gap_inputs(&rows)).unwrap();
    assert!(table.iter().all(|g| g.satellite == 75.0 && g.map == 50.0 && g.difference() == 25.0));
}

#[test]
fn supervised_single_class_is_perfect() {
    let mut cfg = tiny(ExperimentKind::DomainGap);
    cfg.pretrain.steps = 3;
    let data = load_dataset(&cfg, Domain::Satellite, 0).unwrap();
    let run = train_supervised(&cfg, &data.bank, &BTreeSet::from([2]), 0).unwrap();
    assert_eq!(run.top1, 1.0);
    assert_eq!(run.loss.len(), 3);
}

#[test]
fn random_init_rows_report_zero_steps() {
    let mut cfg = tiny(ExperimentKind::Generalizability);
    cfg.workflows = vec![Workflow::RandomInit];
    let data = load_dataset(&cfg, Domain::Satellite, 1).unwrap();
    let subset = choose_classes(4, 2, 1).unwrap();
    let pre = pretrain(&cfg, Workflow::RandomInit, &data.bank, &subset, 1, None).unwrap();
    assert!(pre.loss.is_empty());
    let rows = run_generalizability(&cfg, None).unwrap().rows;
    assert!(rows.iter().all(|r| r.steps == 0));
}

#[test]
fn shuffled_labels_leave_supervised_at_chance() {
    use rand::seq::SliceRandom;
    let mut cfg = tiny(ExperimentKind::DomainGap);
    cfg.data.samples_per_city = 50;
    cfg.pretrain.steps = 100;
    let mut data = load_dataset(&cfg, Domain::Satellite, 2).unwrap();
    data.bank.labels.shuffle(&mut urbanssl::seed::rng(2, "shuffle", 0));
    let all: BTreeSet<usize> = (0..4).collect();
    let run = train_supervised(&cfg, &data.bank, &all, 2).unwrap();
    let n = run.result.total as f64;
    let sigma = (0.25f64 * 0.75 / n).sqrt();
    assert!((run.top1 - 0.25).abs() <= 3.0 * sigma, "{}", run.top1);
}

#[test]
fn domain_gap_covers_both_domains() {
    let cfg = tiny(ExperimentKind::DomainGap);
    let report = urbanssl::bench::run_domain_gap(&cfg, None).unwrap();
    assert_eq!(report.rows.len(), 2 * cfg.workflows.len());
    assert_eq!(report.gap.len(), cfg.workflows.len());
    for g in &report.gap {
        let mean = |d: Domain| {
            report.rows.iter().filter(|r| r.domain == d && r.workflow.as_str() == g.method).map(|r| 100.0 * r.top1).sum::<f64>()
        };
        assert_eq!(g.satellite, mean(Domain::Satellite));
        assert_eq!(g.map, mean(Domain::Map));
    }
}
