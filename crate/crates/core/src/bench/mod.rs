//! Experiment harness: generalizability to unseen cities, the abstraction
//! experiment on map tiles, a supervised baseline and the domain-gap table.

mod data;
mod report;

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationPipeline, ViewRecipe};
use crate::contrastive::{ContrastiveConfig, ContrastiveState, ContrastiveWorkflow};
use crate::dino::{DinoConfig, DistillationState};
use crate::geo::load_cities;
use crate::nn::{
    clip_grad_norm, load_checkpoint, save_checkpoint, Architecture, Encoder, EncoderConfig, Graph, LrSchedule, ParamSet, Sgd,
    SgdConfig, Tensor,
};
use crate::probe::{argmax, run_probe, summarize, ExtractionMode, FrozenRepresentation, ProbeConfig, ProbeResult};
use crate::raster::{images_to_tensor, FloatImage};
use crate::tiles::{build_manifest_with, Domain, ManifestOptions, Split, StyleSpec, TileSource};
use crate::train::{write_loss_csv, StepRecord};
use crate::{seed, Error, Result};

pub use data::{choose_classes, synthetic_cities, PretrainLoader, TileBank};
pub use report::{
    domain_gap_table, read_report_csv, render_markdown, write_gap_csv, write_report_csv, ExperimentReport, GapInput,
    GapRow, ReportRow, REPORT_HEADER,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Generalizability,
    Abstraction,
    DomainGap,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Generalizability => "generalizability",
            ExperimentKind::Abstraction => "abstraction",
            ExperimentKind::DomainGap => "domain_gap",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workflow {
    V1,
    V2,
    Dino,
    Supervised,
    /// Untrained encoder; the reference point for what pretraining adds.
    RandomInit,
}

impl Workflow {
    pub fn as_str(self) -> &'static str {
        match self {
            Workflow::V1 => "v1",
            Workflow::V2 => "v2",
            Workflow::Dino => "dino",
            Workflow::Supervised => "supervised",
            Workflow::RandomInit => "random_init",
        }
    }

    pub fn is_self_supervised(self) -> bool {
        matches!(self, Workflow::V1 | Workflow::V2 | Workflow::Dino)
    }
}

impl fmt::Display for Workflow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Workflow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v1" => Ok(Workflow::V1),
            "v2" => Ok(Workflow::V2),
            "dino" => Ok(Workflow::Dino),
            "supervised" => Ok(Workflow::Supervised),
            "random_init" => Ok(Workflow::RandomInit),
            other => Err(Error::Config(format!("unknown workflow {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    #[default]
    Synthetic,
    Cache,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of synthetic cities, ignored when `cities_file` is set.
    pub cities: usize,
    pub cities_file: Option<PathBuf>,
    pub samples_per_city: usize,
    pub split_ratio: f64,
    pub tile_px: u32,
    pub source: SourceKind,
    pub cache_dir: Option<PathBuf>,
    pub blocklist: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            cities: 20,
            cities_file: None,
            samples_per_city: 200,
            split_ratio: 0.8,
            tile_px: 64,
            source: SourceKind::Synthetic,
            cache_dir: None,
            blocklist: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// How many cities the representation may see.
    pub cities: usize,
    pub steps: usize,
    /// Step budget for self-distillation, which is far costlier per step.
    pub dino_steps: Option<usize>,
    pub batch_size: usize,
    pub queue_size: usize,
    pub base_lr: f64,
    pub key_momentum: f64,
    pub temperature: Option<f64>,
    pub input_size: usize,
    pub embedding_dim: usize,
    pub dino_input_size: usize,
    pub dino_out_dim: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            cities: 10,
            steps: 2000,
            dino_steps: None,
            batch_size: 64,
            queue_size: 1024,
            base_lr: 0.03,
            key_momentum: 0.999,
            temperature: None,
            input_size: 32,
            embedding_dim: 128,
            dino_input_size: 32,
            dino_out_dim: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_domain")]
    pub domain: Domain,
    pub workflows: Vec<Workflow>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

fn default_domain() -> Domain {
    Domain::Satellite
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    /// The desk-scale default for `kind`.
    pub fn desk(kind: ExperimentKind) -> Self {
        let (domain, workflows, cities) = match kind {
            ExperimentKind::Generalizability => (Domain::Satellite, vec![Workflow::V2, Workflow::RandomInit], 10),
            ExperimentKind::Abstraction => (Domain::Map, vec![Workflow::V1, Workflow::V2], 20),
            ExperimentKind::DomainGap => (Domain::Satellite, vec![Workflow::Supervised, Workflow::V2], 20),
        };
        ExperimentConfig {
            experiment: kind,
            domain,
            workflows,
            seeds: vec![0],
            data: DataConfig::default(),
            pretrain: PretrainConfig { cities, ..Default::default() },
            probe: ProbeConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.workflows.is_empty() {
            return Err(Error::Config("no workflows configured".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds configured".into()));
        }
        let d = &self.data;
        if d.samples_per_city < 2 || !(d.split_ratio > 0.0 && d.split_ratio < 1.0) || d.tile_px < 8 {
            return Err(Error::Config("invalid data section".into()));
        }
        if d.source == SourceKind::Cache && d.cache_dir.is_none() {
            return Err(Error::Config("cache source needs data.cache_dir".into()));
        }
        let p = &self.pretrain;
        if p.cities == 0 || p.batch_size == 0 || p.queue_size % p.batch_size != 0 {
            return Err(Error::Config("invalid pretrain section".into()));
        }
        if d.cities_file.is_none() && p.cities > d.cities {
            return Err(Error::Config(format!(
                "pretrain cities ({}) must be a subset of the {} test cities",
                p.cities, d.cities
            )));
        }
        if self.experiment == ExperimentKind::Abstraction && self.domain != Domain::Map {
            return Err(Error::Config("the abstraction experiment runs on map tiles".into()));
        }
        self.probe.validate()
    }

    fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_size: self.pretrain.input_size,
            embedding_dim: self.pretrain.embedding_dim,
            ..EncoderConfig::default()
        }
    }

    pub fn contrastive_config(&self, workflow: ContrastiveWorkflow) -> ContrastiveConfig {
        let base = ContrastiveConfig::for_workflow(workflow);
        let encoder = self.encoder_config();
        let views = match workflow {
            ContrastiveWorkflow::V1 => AugmentationPipeline::v1(encoder.input_size),
            ContrastiveWorkflow::V2 => AugmentationPipeline::v2(encoder.input_size),
        };
        let p = &self.pretrain;
        ContrastiveConfig {
            projection_dim: encoder.embedding_dim,
            encoder,
            temperature: p.temperature.unwrap_or(base.temperature),
            queue_size: p.queue_size,
            momentum: p.key_momentum,
            optimizer: SgdConfig { base_lr: p.base_lr, batch_size: p.batch_size, ..SgdConfig::default() },
            steps: p.steps,
            views: ViewRecipe::pair(views),
            ..base
        }
    }

    pub fn dino_config(&self) -> DinoConfig {
        let p = &self.pretrain;
        let encoder = EncoderConfig {
            input_size: p.dino_input_size,
            embedding_dim: p.embedding_dim,
            ..EncoderConfig::tiny_transformer()
        };
        let local = (p.dino_input_size / 2).max(encoder.transformer.patch);
        DinoConfig {
            encoder,
            out_dim: p.dino_out_dim,
            optimizer: SgdConfig { base_lr: p.base_lr, batch_size: p.batch_size, ..SgdConfig::default() },
            steps: p.dino_steps.unwrap_or(p.steps),
            views: ViewRecipe::multi_crop(p.dino_input_size, local, 4),
            ..DinoConfig::default()
        }
    }

    fn steps_for(&self, workflow: Workflow) -> usize {
        match workflow {
            Workflow::RandomInit => 0,
            Workflow::Dino => self.pretrain.dino_steps.unwrap_or(self.pretrain.steps),
            _ => self.pretrain.steps,
        }
    }
}

/// The tiles of one (seed, domain) plus the city list they came from.
pub struct Dataset {
    pub bank: TileBank,
    pub seed: u64,
}

pub fn load_dataset(cfg: &ExperimentConfig, domain: Domain, seed: u64) -> Result<Dataset> {
    let d = &cfg.data;
    let cities = match &d.cities_file {
        Some(path) => load_cities(path)?,
        None => synthetic_cities(d.cities, seed),
    };
    let opts = ManifestOptions {
        samples_per_city: d.samples_per_city,
        split_ratio: d.split_ratio,
        seed,
        size_px: d.tile_px,
        blocklist: d.blocklist.clone(),
        ..Default::default()
    };
    let manifest = build_manifest_with(&cities, &opts)?;
    if cfg.pretrain.cities > manifest.cities.len() {
        return Err(Error::Config(format!(
            "pretrain cities ({}) exceed the {} available cities",
            cfg.pretrain.cities,
            manifest.cities.len()
        )));
    }
    let source = match d.source {
        SourceKind::Synthetic => TileSource::Synthetic { style: StyleSpec::default(), size_px: None },
        SourceKind::Cache => TileSource::CacheOnly { cache_dir: d.cache_dir.clone().expect("validated") },
    };
    Ok(Dataset { bank: TileBank::load(&manifest, domain, &source)?, seed })
}

/// Rebuilds the encoder stored at the front of a checkpoint written by
/// [`pretrain`].
pub fn load_encoder(path: &Path) -> Result<Encoder<f32>> {
    let ckpt = load_checkpoint(path)?;
    let cfg_value = ckpt.header.config.get("encoder").cloned().unwrap_or(ckpt.header.config.clone());
    let config: EncoderConfig = serde_json::from_value(cfg_value)?;
    let mut encoder = Encoder::new(config, 0)?;
    let n = encoder.params().len();
    if ckpt.tensors.len() < n {
        return Err(Error::Validation(format!("{} holds fewer tensors than the encoder", path.display())));
    }
    encoder.params_mut().load_values(ckpt.tensors.into_iter().take(n).collect())?;
    Ok(encoder)
}

/// A pretrained (or untouched) encoder and the evidence of how it was made.
pub struct Pretrained {
    pub encoder: Encoder<f32>,
    pub loss: Vec<StepRecord>,
    pub tiles_served: usize,
    pub holdout_served: usize,
    /// End-to-end top-1 of the supervised classifier, when applicable.
    pub supervised_top1: Option<f64>,
}

fn write_checkpoint(dir: Option<&Path>, config: serde_json::Value, step: usize, sets: &[&ParamSet<f32>]) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&dir.join("checkpoint.bin"), config, step as u64, sets)?;
    }
    Ok(())
}

/// Trains `workflow` on training tiles of `allowed` cities only.
pub fn pretrain(
    cfg: &ExperimentConfig,
    workflow: Workflow,
    bank: &TileBank,
    allowed: &BTreeSet<usize>,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<Pretrained> {
    let mut loader = PretrainLoader::new(bank, allowed.clone(), seed)?;
    let (encoder, loss) = match workflow {
        Workflow::RandomInit => {
            let encoder = Encoder::new(cfg.encoder_config(), seed::derive(seed, "query_encoder", 0))?;
            write_checkpoint(out_dir, serde_json::to_value(cfg.encoder_config())?, 0, &[encoder.params()])?;
            (encoder, Vec::new())
        }
        Workflow::V1 | Workflow::V2 => {
            let w = if workflow == Workflow::V1 { ContrastiveWorkflow::V1 } else { ContrastiveWorkflow::V2 };
            let ccfg = cfg.contrastive_config(w);
            let b = ccfg.batch_size();
            let mut state = ContrastiveState::new(ccfg, seed)?;
            for i in 0..state.config.warmup_batches() {
                let batch = loader.next_batch(b)?;
                state.warmup_batch(&batch, i)?;
            }
            let mut loss = Vec::with_capacity(state.config.steps);
            for _ in 0..state.config.steps {
                let batch = loader.next_batch(b)?;
                loss.push(state.train_step(&batch)?);
            }
            write_checkpoint(out_dir, serde_json::to_value(&state.config)?, state.step(), &state.checkpoint_sets())?;
            (state.encoder().clone(), loss)
        }
        Workflow::Dino => {
            let dcfg = cfg.dino_config();
            let b = dcfg.optimizer.batch_size;
            let mut state = DistillationState::new(dcfg, seed)?;
            let mut loss = Vec::with_capacity(state.config.steps);
            for _ in 0..state.config.steps {
                let batch = loader.next_batch(b)?;
                loss.push(state.distill_step(&batch)?.record);
            }
            write_checkpoint(out_dir, serde_json::to_value(&state.config)?, state.step(), &state.checkpoint_sets())?;
            (state.encoder().clone(), loss)
        }
        Workflow::Supervised => {
            let run = train_supervised(cfg, bank, allowed, seed)?;
            write_checkpoint(out_dir, serde_json::to_value(cfg.encoder_config())?, run.loss.len(), &[run.encoder.params()])?;
            return Ok(Pretrained {
                encoder: run.encoder,
                loss: run.loss,
                tiles_served: run.tiles_served,
                holdout_served: 0,
                supervised_top1: Some(run.top1),
            });
        }
    };
    if let Some(dir) = out_dir {
        write_loss_csv(&dir.join("loss.csv"), &loss)?;
    }
    Ok(Pretrained {
        encoder,
        loss,
        tiles_served: loader.total_served(),
        holdout_served: loader.holdout_served(),
        supervised_top1: None,
    })
}

pub struct SupervisedRun {
    pub encoder: Encoder<f32>,
    pub top1: f64,
    pub result: ProbeResult,
    pub loss: Vec<StepRecord>,
    pub tiles_served: usize,
}

/// Trains the encoder and a linear classifier end to end with cross-entropy
/// on the training tiles of `classes`, then scores the test tiles.
pub fn train_supervised(
    cfg: &ExperimentConfig,
    bank: &TileBank,
    classes: &BTreeSet<usize>,
    seed: u64,
) -> Result<SupervisedRun> {
    let enc_cfg = cfg.encoder_config();
    let p = &cfg.pretrain;
    let mut encoder = Encoder::new(enc_cfg.clone(), seed::derive(seed, "supervised_encoder", 0))?;
    let c = classes.len();
    let mut head = ParamSet::new();
    let mut rng = seed::rng(seed, "supervised_head", 0);
    head.add("classifier.weight", crate::nn::init::kaiming_uniform(&[enc_cfg.embedding_dim, c], enc_cfg.embedding_dim, &mut rng));
    head.add("classifier.bias", Tensor::zeros(&[c]));
    let train_idx = bank.select(Split::Train, classes);
    let (train_images, train_labels) = bank.labeled(&train_idx, classes);
    if train_images.is_empty() {
        return Err(Error::Config("no labeled training tiles".into()));
    }
    let pipeline = AugmentationPipeline::v1(enc_cfg.input_size).without_color();
    let mut opt = Sgd::new(SgdConfig { base_lr: p.base_lr, batch_size: p.batch_size, ..SgdConfig::default() })?;
    let mut pick = seed::rng(seed, "supervised_batches", 0);
    let mut loss = Vec::with_capacity(p.steps);
    for step in 0..p.steps {
        let idx: Vec<usize> =
            (0..p.batch_size).map(|_| rand::Rng::gen_range(&mut pick, 0..train_images.len())).collect();
        let views_seed = seed::derive(seed, "supervised_views", step as u64);
        let views: Vec<FloatImage> = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| pipeline.apply(&train_images[i], &mut seed::substream(views_seed, k as u64)))
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(&views)?);
        let out = encoder.forward(&mut g, x)?;
        let logits = crate::nn::layers::linear(&mut g, &head, out.embedding, 0, Some(1));
        let l = g.cross_entropy(logits, &labels);
        let value = g.value(l).item() as f64;
        let grads = g.backward(l)?;
        encoder.params_mut().accumulate(&g, &grads);
        head.accumulate(&g, &grads);
        let lr = LrSchedule::Cosine.lr_at(step, p.steps, p.base_lr);
        let mut groups = [encoder.params_mut(), &mut head];
        let grad_norm = clip_grad_norm(&mut groups, 5.0);
        opt.step(&mut groups, lr);
        loss.push(StepRecord { step: step + 1, loss: value, lr, grad_norm });
    }
    let test_idx = bank.select(Split::Test, classes);
    let (test_images, test_labels) = bank.labeled(&test_idx, classes);
    let preds = predict_end_to_end(&encoder, &head, &test_images)?;
    let result = summarize(&preds, &test_labels, c, &cfg.probe);
    Ok(SupervisedRun { encoder, top1: result.top1_accuracy, result, loss, tiles_served: p.steps * p.batch_size })
}

fn predict_end_to_end(encoder: &Encoder<f32>, head: &ParamSet<f32>, images: &[FloatImage]) -> Result<Vec<usize>> {
    let size = encoder.config().input_size;
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let prepared: Vec<FloatImage> = chunk.iter().map(|im| im.center_square(size)).collect();
        let mut g = Graph::inference();
        let x = g.constant(images_to_tensor(&prepared)?);
        let out = encoder.forward(&mut g, x)?;
        let logits = crate::nn::layers::linear(&mut g, head, out.embedding, 0, Some(1));
        let v = g.value(logits);
        preds.extend((0..v.rows()).map(|i| argmax(v.row(i))));
    }
    Ok(preds)
}

fn extraction_mode(encoder: &Encoder<f32>) -> ExtractionMode {
    match encoder.config().architecture {
        Architecture::SmallConv => ExtractionMode::FinalEmbedding,
        Architecture::TinyTransformer => ExtractionMode::ConcatLast4Blocks,
    }
}

/// Frozen-probe outcome on one class set.
pub struct ProbeOutcome {
    pub result: ProbeResult,
    pub frozen_ok: bool,
}

pub fn probe_classes(
    cfg: &ExperimentConfig,
    encoder: &Encoder<f32>,
    bank: &TileBank,
    classes: &BTreeSet<usize>,
    seed: u64,
) -> Result<ProbeOutcome> {
    let rep = FrozenRepresentation::new(encoder.clone(), extraction_mode(encoder))?;
    let (train_x, train_y) = bank.labeled(&bank.select(Split::Train, classes), classes);
    let (test_x, test_y) = bank.labeled(&bank.select(Split::Test, classes), classes);
    let run = run_probe(&rep, (&train_x, &train_y), (&test_x, &test_y), classes.len(), &cfg.probe, seed)?;
    let frozen_ok = run.checksum_before == run.checksum_after && run.checksum_before == encoder.params().checksum();
    Ok(ProbeOutcome { result: run.result, frozen_ok })
}

fn seed_dir(root: Option<&Path>, cfg: &ExperimentConfig, workflow: Workflow, domain: Domain, seed: u64) -> Option<PathBuf> {
    root.map(|r| {
        r.join(cfg.experiment.as_str())
            .join(workflow.as_str())
            .join(domain.as_str())
            .join(format!("seed-{seed}"))
    })
}

fn row(
    cfg: &ExperimentConfig,
    domain: Domain,
    workflow: Workflow,
    seed: u64,
    pretrained: &Pretrained,
    pretrain_classes: usize,
    test_classes: &BTreeSet<usize>,
    pretrain_set: &BTreeSet<usize>,
    top1: f64,
    frozen_ok: bool,
) -> ReportRow {
    ReportRow {
        experiment: cfg.experiment,
        domain,
        workflow,
        seed,
        pretrain_cities: pretrain_classes,
        steps: cfg.steps_for(workflow),
        test_cities: test_classes.len(),
        unseen_cities: test_classes.difference(pretrain_set).count(),
        top1,
        tiles_served: pretrained.tiles_served,
        holdout_tiles: pretrained.holdout_served,
        frozen_ok,
    }
}

/// Pretrains on a strict subset of cities and probes on that subset and on
/// all cities.
pub fn run_generalizability(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &s in &cfg.seeds {
        let data = load_dataset(cfg, cfg.domain, s)?;
        let n = data.bank.class_names.len();
        if cfg.pretrain.cities >= n {
            return Err(Error::Config(format!(
                "holdout needs fewer pretrain cities than the {n} test cities, got {}",
                cfg.pretrain.cities
            )));
        }
        let subset = choose_classes(n, cfg.pretrain.cities, s)?;
        let all: BTreeSet<usize> = (0..n).collect();
        for &w in &cfg.workflows {
            let dir = seed_dir(out, cfg, w, cfg.domain, s);
            let pre = pretrain(cfg, w, &data.bank, &subset, s, dir.as_deref())?;
            let sub = probe_classes(cfg, &pre.encoder, &data.bank, &subset, s)?;
            let full = probe_classes(cfg, &pre.encoder, &data.bank, &all, s)?;
            if let Some(d) = &dir {
                full.result.save_json(&d.join("probe.json"))?;
            }
            rows.push(row(cfg, cfg.domain, w, s, &pre, subset.len(), &subset, &subset, sub.result.top1_accuracy, sub.frozen_ok));
            rows.push(row(cfg, cfg.domain, w, s, &pre, subset.len(), &all, &subset, full.result.top1_accuracy, full.frozen_ok));
        }
    }
    finish(cfg, rows, Vec::new(), out)
}

/// Pretrains and probes on map tiles, one row per workflow and seed.
pub fn run_abstraction(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &s in &cfg.seeds {
        let data = load_dataset(cfg, Domain::Map, s)?;
        let n = data.bank.class_names.len();
        let subset = choose_classes(n, cfg.pretrain.cities, s)?;
        let all: BTreeSet<usize> = (0..n).collect();
        for &w in &cfg.workflows {
            let dir = seed_dir(out, cfg, w, Domain::Map, s);
            let pre = pretrain(cfg, w, &data.bank, &subset, s, dir.as_deref())?;
            let (top1, frozen_ok) = match pre.supervised_top1 {
                Some(t) => (t, true),
                None => {
                    let p = probe_classes(cfg, &pre.encoder, &data.bank, &all, s)?;
                    if let Some(d) = &dir {
                        p.result.save_json(&d.join("probe.json"))?;
                    }
                    (p.result.top1_accuracy, p.frozen_ok)
                }
            };
            rows.push(row(cfg, Domain::Map, w, s, &pre, subset.len(), &all, &subset, top1, frozen_ok));
        }
    }
    finish(cfg, rows, Vec::new(), out)
}

/// Runs every workflow on both domains and tabulates satellite − map.
pub fn run_domain_gap(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &s in &cfg.seeds {
        for domain in Domain::ALL {
            let data = load_dataset(cfg, domain, s)?;
            let n = data.bank.class_names.len();
            let all: BTreeSet<usize> = (0..n).collect();
            let subset = choose_classes(n, cfg.pretrain.cities, s)?;
            for &w in &cfg.workflows {
                let dir = seed_dir(out, cfg, w, domain, s);
                let pre = pretrain(cfg, w, &data.bank, &subset, s, dir.as_deref())?;
                let (top1, frozen_ok) = match pre.supervised_top1 {
                    Some(t) => (t, true),
                    None => {
                        let p = probe_classes(cfg, &pre.encoder, &data.bank, &all, s)?;
                        if let Some(d) = &dir {
                            p.result.save_json(&d.join("probe.json"))?;
                        }
                        (p.result.top1_accuracy, p.frozen_ok)
                    }
                };
                rows.push(row(cfg, domain, w, s, &pre, subset.len(), &all, &subset, top1, frozen_ok));
            }
        }
    }
    let inputs = gap_inputs(&rows);
    let gap = domain_gap_table(&inputs)?;
    finish(cfg, rows, gap, out)
}

/// Mean top-1 (in percent) per workflow and domain over the all-city rows.
pub fn gap_inputs(rows: &[ReportRow]) -> Vec<GapInput> {
    let mut workflows: Vec<Workflow> = rows.iter().map(|r| r.workflow).collect();
    workflows.sort();
    workflows.dedup();
    workflows
        .into_iter()
        .map(|w| {
            let mean = |d: Domain| {
                let v: Vec<f64> = rows.iter().filter(|r| r.workflow == w && r.domain == d).map(|r| r.top1).collect();
                (!v.is_empty()).then(|| 100.0 * v.iter().sum::<f64>() / v.len() as f64)
            };
            GapInput { method: w.as_str().to_string(), satellite: mean(Domain::Satellite), map: mean(Domain::Map) }
        })
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    match cfg.experiment {
        ExperimentKind::Generalizability => run_generalizability(cfg, out),
        ExperimentKind::Abstraction => run_abstraction(cfg, out),
        ExperimentKind::DomainGap => run_domain_gap(cfg, out),
    }
}

fn finish(cfg: &ExperimentConfig, rows: Vec<ReportRow>, gap: Vec<GapRow>, out: Option<&Path>) -> Result<ExperimentReport> {
    let report = ExperimentReport { rows, gap };
    if let Some(root) = out {
        report.write(root, cfg)?;
    }
    Ok(report)
}
