//! Momentum-contrast pretraining: InfoNCE over a FIFO queue of negatives,
//! a momentum-updated key encoder and the V1/V2 workflow variants.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{batch_views, AugmentationPipeline, ViewRecipe};
use crate::nn::{
    clip_grad_norm, l2_normalize_rows, Encoder, EncoderConfig, Float, Graph, LrSchedule, Mlp, ParamSet, Sgd,
    SgdConfig, Tensor, Var,
};
use crate::raster::{images_to_tensor, FloatImage};
use crate::train::StepRecord;
use crate::{seed, Error, Result};

/// Unit-norm tolerance for rows entering the loss or the queue.
pub const NORM_TOLERANCE: f64 = 1e-3;

fn check_unit_rows<T: Float>(t: &Tensor<T>, tol: f64, what: &str) -> Result<()> {
    for i in 0..t.rows() {
        let n = t.row(i).iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > tol {
            return Err(Error::Contract(format!("{what} row {i} has norm {n}")));
        }
    }
    Ok(())
}

/// Binds the InfoNCE loss: the mean over rows of the `(K+1)`-way softmax
/// cross-entropy with the positive logit `q·k⁺/τ` at index 0 and negatives
/// `q·nᵢ/τ`. `queue` enters as a constant; `k_pos` may be a constant or a
/// variable. Rows must be unit-normalized (checked in debug builds).
pub fn info_nce_loss<T: Float>(g: &mut Graph<T>, q: Var, k_pos: Var, queue: &Tensor<T>, temperature: f64) -> Result<Var> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let (qs, ks) = (g.shape(q).to_vec(), g.shape(k_pos).to_vec());
    if qs.len() != 2 || qs != ks || queue.rank() != 2 || queue.shape()[1] != qs[1] {
        return Err(Error::Validation(format!(
            "info_nce shapes: q {qs:?}, k {ks:?}, queue {:?}",
            queue.shape()
        )));
    }
    if cfg!(debug_assertions) {
        check_unit_rows(g.value(q), NORM_TOLERANCE, "query")?;
        check_unit_rows(g.value(k_pos), NORM_TOLERANCE, "positive key")?;
        check_unit_rows(queue, NORM_TOLERANCE, "queue")?;
    }
    let b = qs[0];
    let prod = g.mul(q, k_pos);
    let pos = g.row_sum(prod);
    let logits = if queue.shape()[0] > 0 {
        let negs = g.constant(queue.clone());
        let neg = g.matmul_t(q, negs, false, true);
        g.concat_last(&[pos, neg])
    } else {
        pos
    };
    let logits = g.scale(logits, 1.0 / temperature);
    Ok(g.cross_entropy(logits, &vec![0; b]))
}

/// Loss value only, evaluated without recording gradients.
pub fn info_nce_value<T: Float>(q: &Tensor<T>, k_pos: &Tensor<T>, queue: &Tensor<T>, temperature: f64) -> Result<f64> {
    let mut g = Graph::inference();
    let qv = g.constant(q.clone());
    let kv = g.constant(k_pos.clone());
    let loss = info_nce_loss(&mut g, qv, kv, queue, temperature)?;
    Ok(g.value(loss).item().to_f64_lossy())
}

/// Fixed-capacity FIFO of unit-norm key embeddings.
#[derive(Clone, Debug)]
pub struct NegativeQueue {
    entries: Tensor<f32>,
    cursor: usize,
    filled: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("queue capacity and dimension must be positive".into()));
        }
        Ok(NegativeQueue { entries: Tensor::zeros(&[capacity, dim]), cursor: 0, filled: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.capacity()
    }

    /// All `K` slots, including never-written zero rows.
    pub fn slots(&self) -> &Tensor<f32> {
        &self.entries
    }

    /// The occupied rows (all of them once the queue has filled).
    pub fn negatives(&self) -> Tensor<f32> {
        if self.is_full() {
            self.entries.clone()
        } else {
            self.entries.slice_rows(0, self.filled)
        }
    }

    /// Overwrites the `B` oldest slots with `keys` and advances the cursor.
    pub fn enqueue(&mut self, keys: &Tensor<f32>) -> Result<()> {
        let k = self.capacity();
        let d = self.dim();
        if keys.rank() != 2 || keys.shape()[1] != d {
            return Err(Error::Validation(format!("keys {:?} do not match queue dim {d}", keys.shape())));
        }
        let b = keys.shape()[0];
        if b > k {
            return Err(Error::Config(format!("batch of {b} keys exceeds queue capacity {k}")));
        }
        check_unit_rows(keys, 1e-5, "enqueued key")?;
        for i in 0..b {
            let slot = (self.cursor + i) % k;
            self.entries.data_mut()[slot * d..(slot + 1) * d].copy_from_slice(keys.row(i));
        }
        self.cursor = (self.cursor + b) % k;
        self.filled = (self.filled + b).min(k);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveWorkflow {
    V1,
    V2,
}

/// Identity for V1; a two-layer MLP with hidden width equal to the
/// embedding width for V2.
#[derive(Clone, Debug)]
pub enum ProjectionHead {
    Identity,
    Mlp(Mlp<f32>),
}

impl ProjectionHead {
    pub fn mlp<R: Rng + ?Sized>(embedding_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        ProjectionHead::Mlp(Mlp::new(&[embedding_dim, embedding_dim, output_dim], true, rng))
    }

    pub fn forward(&self, g: &mut Graph<f32>, x: Var) -> Var {
        match self {
            ProjectionHead::Identity => x,
            ProjectionHead::Mlp(m) => m.forward(g, x),
        }
    }

    pub fn params(&self) -> Option<&ParamSet<f32>> {
        match self {
            ProjectionHead::Identity => None,
            ProjectionHead::Mlp(m) => Some(m.params()),
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamSet<f32>> {
        match self {
            ProjectionHead::Identity => None,
            ProjectionHead::Mlp(m) => Some(m.params_mut()),
        }
    }
}

/// Query network `θ_q` and its momentum copy `θ_k`.
#[derive(Clone, Debug)]
pub struct MomentumPair {
    pub query: Encoder<f32>,
    pub query_head: ProjectionHead,
    pub key: Encoder<f32>,
    pub key_head: ProjectionHead,
    pub momentum: f64,
}

impl MomentumPair {
    /// The key network starts as an exact copy of the query network.
    pub fn new(query: Encoder<f32>, query_head: ProjectionHead, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1]")));
        }
        Ok(MomentumPair { key: query.clone(), key_head: query_head.clone(), query, query_head, momentum })
    }

    /// Unit-norm projected embeddings of the query network.
    pub fn query_forward(&self, g: &mut Graph<f32>, x: &Tensor<f32>) -> Result<Var> {
        let xv = g.constant(x.clone());
        let out = self.query.forward(g, xv)?;
        let z = self.query_head.forward(g, out.embedding);
        Ok(g.l2_normalize(z))
    }

    /// Unit-norm key embeddings; no graph is recorded for `θ_k`.
    pub fn keys(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let out = self.key.forward(&mut g, xv)?;
        let z = self.key_head.forward(&mut g, out.embedding);
        Ok(l2_normalize_rows(g.value(z)))
    }

    pub fn key_grads_all_zero(&self) -> bool {
        self.key.params().grads_all_zero() && self.key_head.params().map_or(true, |p| p.grads_all_zero())
    }

    fn query_groups(&mut self) -> Vec<&mut ParamSet<f32>> {
        let mut groups = vec![self.query.params_mut()];
        if let Some(h) = self.query_head.params_mut() {
            groups.push(h);
        }
        groups
    }
}

/// `target ← m·target + (1−m)·source`, set by set.
pub fn ema_update(targets: &mut [&mut ParamSet<f32>], sources: &[&ParamSet<f32>], m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum {m} outside [0, 1]")));
    }
    if targets.len() != sources.len() {
        return Err(Error::Validation("EMA target and source differ in structure".into()));
    }
    for (t, s) in targets.iter_mut().zip(sources) {
        t.ema_from(s, m)?;
    }
    Ok(())
}

/// `θ_k ← m·θ_k + (1−m)·θ_q` for every parameter tensor.
pub fn momentum_update(pair: &mut MomentumPair) -> Result<()> {
    let m = pair.momentum;
    let MomentumPair { query, query_head, key, key_head, .. } = pair;
    match (key_head.params_mut(), query_head.params()) {
        (Some(kh), Some(qh)) => ema_update(&mut [key.params_mut(), kh], &[query.params(), qh], m),
        _ => ema_update(&mut [key.params_mut()], &[query.params()], m),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub workflow: ContrastiveWorkflow,
    pub encoder: EncoderConfig,
    pub temperature: f64,
    pub queue_size: usize,
    pub momentum: f64,
    pub projection_dim: usize,
    pub optimizer: SgdConfig,
    pub schedule: LrSchedule,
    pub steps: usize,
    pub clip_norm: f64,
    pub views: ViewRecipe,
}

impl ContrastiveConfig {
    /// Queue + momentum encoder, no projection head, τ = 0.07, step decay.
    pub fn v1() -> Self {
        let encoder = EncoderConfig::default();
        let views = ViewRecipe::pair(AugmentationPipeline::v1(encoder.input_size));
        ContrastiveConfig {
            workflow: ContrastiveWorkflow::V1,
            projection_dim: encoder.embedding_dim,
            encoder,
            temperature: 0.07,
            queue_size: 1024,
            momentum: 0.999,
            optimizer: SgdConfig::default(),
            schedule: LrSchedule::Step,
            steps: 2000,
            clip_norm: 5.0,
            views,
        }
    }

    /// V1 plus an MLP head, blur and stronger jitter, τ = 0.2, cosine decay.
    pub fn v2() -> Self {
        let base = Self::v1();
        ContrastiveConfig {
            workflow: ContrastiveWorkflow::V2,
            temperature: 0.2,
            schedule: LrSchedule::Cosine,
            views: ViewRecipe::pair(AugmentationPipeline::v2(base.encoder.input_size)),
            ..base
        }
    }

    pub fn for_workflow(w: ContrastiveWorkflow) -> Self {
        match w {
            ContrastiveWorkflow::V1 => Self::v1(),
            ContrastiveWorkflow::V2 => Self::v2(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.optimizer.batch_size
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.optimizer.validate()?;
        self.views.validate()?;
        if !matches!(self.views, ViewRecipe::Pair { .. }) {
            return Err(Error::Config("contrastive training needs a two-view recipe".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        let b = self.batch_size();
        if self.queue_size == 0 || self.queue_size % b != 0 {
            return Err(Error::Config(format!(
                "queue size {} must be a positive multiple of the batch size {b}",
                self.queue_size
            )));
        }
        if self.workflow == ContrastiveWorkflow::V1 && self.projection_dim != self.encoder.embedding_dim {
            return Err(Error::Config("V1 has no projection head, so projection_dim must equal embedding_dim".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Number of key-only batches that fill the queue.
    pub fn warmup_batches(&self) -> usize {
        self.queue_size / self.batch_size()
    }
}

/// Everything a contrastive run owns.
pub struct ContrastiveState {
    pub config: ContrastiveConfig,
    pub pair: MomentumPair,
    pub queue: NegativeQueue,
    optimizer: Sgd<f32>,
    step: usize,
    seed: u64,
}

impl ContrastiveState {
    pub fn new(config: ContrastiveConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.encoder.clone(), seed::derive(seed, "query_encoder", 0))?;
        let head = match config.workflow {
            ContrastiveWorkflow::V1 => ProjectionHead::Identity,
            ContrastiveWorkflow::V2 => ProjectionHead::mlp(
                config.encoder.embedding_dim,
                config.projection_dim,
                &mut seed::rng(seed, "projection_head", 0),
            ),
        };
        let pair = MomentumPair::new(encoder, head, config.momentum)?;
        let queue = NegativeQueue::new(config.queue_size, config.projection_dim)?;
        let optimizer = Sgd::new(config.optimizer.clone())?;
        Ok(ContrastiveState { config, pair, queue, optimizer, step: 0, seed })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn encoder(&self) -> &Encoder<f32> {
        &self.pair.query
    }

    fn views(&self, images: &[FloatImage], label: &str, index: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let views = batch_views(images, &self.config.views, seed::derive(self.seed, label, index))?;
        let (a, b): (Vec<FloatImage>, Vec<FloatImage>) = views
            .into_iter()
            .map(|mut v| {
                let second = v.global.pop().expect("pair recipe");
                (v.global.pop().expect("pair recipe"), second)
            })
            .unzip();
        Ok((images_to_tensor(&a)?, images_to_tensor(&b)?))
    }

    /// Encodes one batch with the key network and enqueues it; used to fill
    /// the queue before the first gradient step.
    pub fn warmup_batch(&mut self, images: &[FloatImage], index: usize) -> Result<()> {
        let (_, xk) = self.views(images, "warmup_views", index as u64)?;
        let keys = self.pair.keys(&xk)?;
        self.queue.enqueue(&keys)
    }

    /// One optimization step: two views, InfoNCE against the queue, SGD on
    /// `θ_q`, momentum update of `θ_k`, then the keys are enqueued.
    pub fn train_step(&mut self, images: &[FloatImage]) -> Result<StepRecord> {
        let (xq, xk) = self.views(images, "train_views", self.step as u64)?;
        let keys = self.pair.keys(&xk)?;
        let negatives = self.queue.negatives();
        let mut g = Graph::new();
        let q = self.pair.query_forward(&mut g, &xq)?;
        let k = g.constant(keys.clone());
        let loss = info_nce_loss(&mut g, q, k, &negatives, self.config.temperature)?;
        let loss_value = g.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Contract(format!("non-finite loss at step {}", self.step)));
        }
        let grads = g.backward(loss)?;
        for set in self.pair.query_groups() {
            set.accumulate(&g, &grads);
        }
        if !self.pair.key_grads_all_zero() {
            return Err(Error::Contract("gradient reached the key encoder".into()));
        }
        let lr = self.config.schedule.lr_at(self.step, self.config.steps, self.config.optimizer.base_lr);
        let mut groups = self.pair.query_groups();
        let grad_norm = clip_grad_norm(&mut groups, self.config.clip_norm);
        self.optimizer.step(&mut groups, lr);
        momentum_update(&mut self.pair)?;
        self.queue.enqueue(&keys)?;
        self.step += 1;
        Ok(StepRecord { step: self.step, loss: loss_value, lr, grad_norm })
    }

    /// Parameter sets written to checkpoints: query encoder, then head.
    pub fn checkpoint_sets(&self) -> Vec<&ParamSet<f32>> {
        let mut sets = vec![self.pair.query.params()];
        if let Some(h) = self.pair.query_head.params() {
            sets.push(h);
        }
        sets
    }
}

/// Random batch indices for step `step`, drawn with replacement.
pub fn sample_batch(pool: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..pool)).collect()
}
