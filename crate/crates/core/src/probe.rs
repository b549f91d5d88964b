//! Frozen-representation evaluation: features from a fixed encoder, a
//! single linear layer trained on top, and top-1 accuracy.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::hflip;
use crate::nn::{step_lr, Architecture, Encoder, Graph, ParamSet, Sgd, SgdConfig, Tensor};
use crate::raster::{images_to_tensor, FloatImage};
use crate::{seed, Error, Result};

const EXTRACT_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    FinalEmbedding,
    ConcatLast4Blocks,
}

/// An encoder whose weights are only ever read.
pub struct FrozenRepresentation {
    encoder: Encoder<f32>,
    mode: ExtractionMode,
    checksum: String,
}

impl FrozenRepresentation {
    pub fn new(encoder: Encoder<f32>, mode: ExtractionMode) -> Result<Self> {
        if mode == ExtractionMode::ConcatLast4Blocks && encoder.config().architecture != Architecture::TinyTransformer {
            return Err(Error::Config("block concatenation needs a transformer encoder".into()));
        }
        let checksum = encoder.params().checksum();
        Ok(FrozenRepresentation { encoder, mode, checksum })
    }

    pub fn mode(&self) -> ExtractionMode {
        self.mode
    }

    pub fn encoder(&self) -> &Encoder<f32> {
        &self.encoder
    }

    /// Checksum taken when the representation was frozen.
    pub fn frozen_checksum(&self) -> &str {
        &self.checksum
    }

    pub fn current_checksum(&self) -> String {
        self.encoder.params().checksum()
    }

    pub fn verify_frozen(&self) -> Result<()> {
        if self.current_checksum() != self.checksum {
            return Err(Error::Contract("encoder weights changed while frozen".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        let c = self.encoder.config();
        match self.mode {
            ExtractionMode::FinalEmbedding => c.embedding_dim,
            ExtractionMode::ConcatLast4Blocks => 4 * c.block_width(),
        }
    }

    /// Center-crops each image to the encoder input size and returns the
    /// `[N, feature_dim]` features.
    pub fn extract(&self, images: &[FloatImage]) -> Result<Tensor<f32>> {
        let size = self.encoder.config().input_size;
        let mut rows: Vec<Tensor<f32>> = Vec::new();
        for chunk in images.chunks(EXTRACT_CHUNK) {
            let prepared: Vec<FloatImage> = chunk
                .iter()
                .map(|im| if im.width() == size && im.height() == size { im.clone() } else { im.center_square(size) })
                .collect();
            let batch = images_to_tensor(&prepared)?;
            let mut g = Graph::inference();
            let x = g.constant(batch);
            let out = self.encoder.forward(&mut g, x)?;
            let feats = match self.mode {
                ExtractionMode::FinalEmbedding => out.embedding,
                ExtractionMode::ConcatLast4Blocks => {
                    let n = out.blocks.len();
                    let last4 = &out.blocks[n - 4..];
                    g.concat_last(last4)
                }
            };
            rows.push(g.value(feats).clone());
        }
        if rows.is_empty() {
            return Err(Error::Validation("no images to extract features from".into()));
        }
        Ok(Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<f64>,
    pub lr_factor: f64,
    /// Standardize each feature dimension with training-set statistics.
    pub standardize: bool,
    /// Add horizontally flipped copies of the training images.
    pub train_flips: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            base_lr: 30.0,
            batch_size: 256,
            momentum: 0.9,
            weight_decay: 0.0,
            milestones: vec![0.6, 0.8],
            lr_factor: 0.1,
            standardize: true,
            train_flips: false,
        }
    }
}

impl ProbeConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(epoch, self.epochs, self.base_lr, &self.milestones, self.lr_factor)
    }

    pub fn validate(&self) -> Result<()> {
        SgdConfig {
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
        }
        .validate()?;
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("probe milestones must be fractions of the schedule".into()));
        }
        Ok(())
    }
}

/// `logits = standardize(x) · W + b`.
#[derive(Clone, Debug)]
pub struct LinearHead {
    params: ParamSet<f32>,
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl LinearHead {
    /// Small uniform weights, zero bias, identity standardization.
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        params.add("probe.weight", Tensor::from_fn(&[feature_dim, num_classes], |_| rng.gen_range(-0.01..0.01)));
        params.add("probe.bias", Tensor::zeros(&[num_classes]));
        LinearHead { params, mean: vec![0.0; feature_dim], inv_std: vec![1.0; feature_dim] }
    }

    /// Builds a head from explicit weights `[F, C]` and bias `[C]`.
    pub fn from_weights(weight: Tensor<f32>, bias: Tensor<f32>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::Validation("head weight/bias shapes disagree".into()));
        }
        let f = weight.shape()[0];
        let mut params = ParamSet::new();
        params.add("probe.weight", weight);
        params.add("probe.bias", bias);
        Ok(LinearHead { params, mean: vec![0.0; f], inv_std: vec![1.0; f] })
    }

    pub fn feature_dim(&self) -> usize {
        self.params.value(0).shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.params.value(0).shape()[1]
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn standardized(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let f = self.feature_dim();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(f) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        out
    }

    pub fn logits(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        if features.rank() != 2 || features.shape()[1] != self.feature_dim() {
            return Err(Error::Validation(format!(
                "features {:?} do not match head width {}",
                features.shape(),
                self.feature_dim()
            )));
        }
        let mut g = Graph::inference();
        let x = g.constant(self.standardized(features));
        let y = crate::nn::layers::linear(&mut g, &self.params, x, 0, Some(1));
        Ok(g.value(y).clone())
    }

    /// Argmax per row; ties go to the lowest class index.
    pub fn predict(&self, features: &Tensor<f32>) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_labels(n: usize, labels: &[usize], num_classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Validation(format!("{n} feature rows but {} labels", labels.len())));
    }
    if num_classes == 0 {
        return Err(Error::Config("probe needs at least one class".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Config(format!("label {bad} outside {num_classes} classes")));
    }
    Ok(())
}

/// Trains a linear softmax classifier on fixed features with SGD and the
/// step schedule. Deterministic in `seed`.
pub fn train_probe(
    features: &Tensor<f32>,
    labels: &[usize],
    num_classes: usize,
    config: &ProbeConfig,
    seed: u64,
) -> Result<LinearHead> {
    config.validate()?;
    if features.rank() != 2 || features.rows() == 0 {
        return Err(Error::Validation("probe needs a non-empty [N, F] feature matrix".into()));
    }
    let (n, f) = (features.rows(), features.shape()[1]);
    check_labels(n, labels, num_classes)?;
    let mut head = LinearHead::new(f, num_classes, &mut seed::rng(seed, "probe_init", 0));
    if config.standardize {
        for j in 0..f {
            let col: Vec<f64> = (0..n).map(|i| features.row(i)[j] as f64).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            head.mean[j] = mean as f32;
            head.inv_std[j] = (1.0 / (var.sqrt() + 1e-6)) as f32;
        }
    }
    let x = head.standardized(features);
    let mut opt = Sgd::new(SgdConfig {
        base_lr: config.base_lr,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
        batch_size: config.batch_size,
    })?;
    let mut rng = seed::rng(seed, "probe_order", 0);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xb = Tensor::from_fn(&[batch.len(), f], |k| x.row(batch[k / f])[k % f]);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xv = g.constant(xb);
            let logits = crate::nn::layers::linear(&mut g, &head.params, xv, 0, Some(1));
            let loss = g.cross_entropy(logits, &yb);
            let grads = g.backward(loss)?;
            head.params.accumulate(&g, &grads);
            opt.step(&mut [&mut head.params], lr);
        }
        if !head.params.all_finite() {
            return Err(Error::Contract(format!("probe weights diverged in epoch {epoch}")));
        }
    }
    Ok(head)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub class_counts: Vec<usize>,
    pub correct: usize,
    pub total: usize,
    pub config: ProbeConfig,
}

pub fn evaluate(head: &LinearHead, features: &Tensor<f32>, labels: &[usize], config: &ProbeConfig) -> Result<ProbeResult> {
    if features.rank() != 2 || features.rows() == 0 {
        return Err(Error::Validation("cannot evaluate on an empty test set".into()));
    }
    let c = head.num_classes();
    check_labels(features.rows(), labels, c)?;
    let preds = head.predict(features)?;
    Ok(summarize(&preds, labels, c, config))
}

/// Aggregates per-example predictions into a result.
pub fn summarize(preds: &[usize], labels: &[usize], num_classes: usize, config: &ProbeConfig) -> ProbeResult {
    let mut counts = vec![0usize; num_classes];
    let mut hits = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        counts[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    let total = labels.len();
    ProbeResult {
        top1_accuracy: correct as f64 / total.max(1) as f64,
        per_class_accuracy: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
            .collect(),
        class_counts: counts,
        correct,
        total,
        config: config.clone(),
    }
}

impl ProbeResult {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        crate::train::write_string(path, &serde_json::to_string_pretty(self)?)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// `class,name,count,accuracy` rows.
    pub fn write_per_class_csv(&self, path: &Path, class_names: &[String]) -> Result<()> {
        crate::train::ensure_parent(path)?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["class", "name", "count", "accuracy"])?;
        for (i, (&n, &a)) in self.class_counts.iter().zip(&self.per_class_accuracy).enumerate() {
            let name = class_names.get(i).map(String::as_str).unwrap_or("");
            w.write_record([i.to_string(), name.to_string(), n.to_string(), a.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Feature extraction, probe training and evaluation in one pass, with the
/// frozen contract checked before and after.
pub struct ProbeRun {
    pub result: ProbeResult,
    pub head: LinearHead,
    pub checksum_before: String,
    pub checksum_after: String,
}

pub fn run_probe(
    rep: &FrozenRepresentation,
    train: (&[FloatImage], &[usize]),
    test: (&[FloatImage], &[usize]),
    num_classes: usize,
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeRun> {
    let checksum_before = rep.current_checksum();
    rep.verify_frozen()?;
    let mut train_x = rep.extract(train.0)?;
    let mut train_y = train.1.to_vec();
    if config.train_flips {
        let flipped: Vec<FloatImage> = train.0.iter().map(hflip).collect();
        train_x = Tensor::concat_rows(&[&train_x, &rep.extract(&flipped)?])?;
        train_y.extend_from_slice(train.1);
    }
    let head = train_probe(&train_x, &train_y, num_classes, config, seed)?;
    let test_x = rep.extract(test.0)?;
    let result = evaluate(&head, &test_x, test.1, config)?;
    let checksum_after = rep.current_checksum();
    rep.verify_frozen()?;
    Ok(ProbeRun { result, head, checksum_before, checksum_after })
}

/// Mean pairwise cosine similarity within classes and between classes.
pub fn class_similarity(embeddings: &Tensor<f32>, labels: &[usize]) -> (f64, f64) {
    let e = crate::nn::l2_normalize_rows(&embeddings.cast::<f64>());
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..e.rows() {
        for j in i + 1..e.rows() {
            let s: f64 = e.row(i).iter().zip(e.row(j)).map(|(a, b)| a * b).sum();
            if labels[i] == labels[j] {
                within += s;
                nw += 1;
            } else {
                between += s;
                nb += 1;
            }
        }
    }
    (within / nw.max(1) as f64, between / nb.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncoderConfig;

    #[test]
    fn ties_break_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn schedule_milestones() {
        let c = ProbeConfig::default();
        assert_eq!(c.lr_at(0), 30.0);
        assert!((c.lr_at(90) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn concat_mode_requires_transformer() {
        let enc = Encoder::new(EncoderConfig::default(), 0).unwrap();
        assert!(FrozenRepresentation::new(enc, ExtractionMode::ConcatLast4Blocks).is_err());
        let enc = Encoder::new(EncoderConfig::tiny_transformer(), 0).unwrap();
        let rep = FrozenRepresentation::new(enc, ExtractionMode::ConcatLast4Blocks).unwrap();
        assert_eq!(rep.feature_dim(), 256);
    }

    #[test]
    fn summarize_counts() {
        let r = summarize(&[0, 1, 1, 2], &[0, 1, 2, 2], 3, &ProbeConfig::default());
        assert_eq!(r.correct, 3);
        assert_eq!(r.per_class_accuracy, vec![1.0, 1.0, 0.5]);
        assert_eq!(r.top1_accuracy, 0.75);
    }

    #[test]
    fn label_errors() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(train_probe(&x, &[0, 5], 3, &ProbeConfig::default(), 0).is_err());
        assert!(train_probe(&x, &[0], 3, &ProbeConfig::default(), 0).is_err());
    }
}
