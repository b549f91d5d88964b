//! Self-distillation with a momentum teacher: multi-crop views, teacher
//! centering and sharpening, cross-entropy over pseudo-class distributions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{batch_views, ViewRecipe};
use crate::contrastive::ema_update;
use crate::nn::init::kaiming_uniform;
use crate::nn::{clip_grad_norm, Encoder, EncoderConfig, Float, Graph, LrSchedule, Mlp, ParamSet, Sgd, SgdConfig, Tensor, Var};
use crate::raster::{images_to_tensor, FloatImage};
use crate::train::StepRecord;
use crate::{seed, Error, Result};

/// `softmax((logits − center) / τ_t)` for every row of `[N, P]` logits,
/// evaluated in `f64`.
pub fn teacher_distribution<T: Float>(logits: &Tensor<T>, center: &[T], temperature: f64) -> Result<Tensor<T>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Config(format!("teacher temperature {temperature} must be positive")));
    }
    let p = logits.row_len();
    if center.len() != p {
        return Err(Error::Validation(format!("center has {} entries, logits have {p}", center.len())));
    }
    let mut out = Vec::with_capacity(logits.len());
    for i in 0..logits.rows() {
        let z: Vec<f64> = logits
            .row(i)
            .iter()
            .zip(center)
            .map(|(l, c)| (l.to_f64_lossy() - c.to_f64_lossy()) / temperature)
            .collect();
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| T::from_f64_lossy(v / s)));
    }
    Ok(Tensor::new(logits.shape(), out)?)
}

/// Mean entropy (nats) of the rows of a probability matrix.
pub fn mean_entropy<T: Float>(probs: &Tensor<T>) -> f64 {
    let n = probs.rows().max(1) as f64;
    (0..probs.rows())
        .map(|i| {
            probs.row(i).iter().map(|p| p.to_f64_lossy()).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum::<f64>()
        })
        .sum::<f64>()
        / n
}

/// Binds the multi-crop distillation loss. `student[v]` holds `[B, P]`
/// logits of crop `v`; the first `teacher.len()` crops are the global crops
/// the teacher saw, in the same order. The loss averages the batch-mean
/// cross-entropy `−Σ p_t log softmax(s/τ_s)` over all (teacher crop g,
/// student crop v) pairs with `v ≠ g`.
pub fn dino_loss<T: Float>(g: &mut Graph<T>, student: &[Var], teacher: &[Tensor<T>], student_temperature: f64) -> Result<Var> {
    if teacher.len() < 2 {
        return Err(Error::Config(format!("self-distillation needs at least 2 global crops, got {}", teacher.len())));
    }
    if student.len() < teacher.len() {
        return Err(Error::Config("every teacher crop must also be a student crop".into()));
    }
    if !(student_temperature.is_finite() && student_temperature > 0.0) {
        return Err(Error::Config(format!("student temperature {student_temperature} must be positive")));
    }
    let shape = teacher[0].shape().to_vec();
    for &s in student {
        if g.shape(s) != &shape[..] {
            return Err(Error::Validation(format!("student logits {:?} vs teacher {:?}", g.shape(s), shape)));
        }
    }
    let b = shape[0].max(1);
    let log_probs: Vec<Var> = student
        .iter()
        .map(|&s| {
            let s = g.scale(s, 1.0 / student_temperature);
            g.log_softmax(s)
        })
        .collect();
    let mut total: Option<Var> = None;
    let mut pairs = 0usize;
    for (gi, t) in teacher.iter().enumerate() {
        let tv = g.constant(t.clone());
        for (vi, &lp) in log_probs.iter().enumerate() {
            if vi == gi {
                continue;
            }
            let prod = g.mul(tv, lp);
            let s = g.sum(prod);
            total = Some(match total {
                Some(acc) => g.add(acc, s),
                None => s,
            });
            pairs += 1;
        }
    }
    let total = total.expect("at least one pair");
    Ok(g.scale(total, -1.0 / (b * pairs) as f64))
}

/// `c ← m·c + (1−m)·mean_rows(logits)`.
pub fn center_update(center: &mut [f32], teacher_logits: &Tensor<f32>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("center momentum {m} outside [0, 1]")));
    }
    let p = center.len();
    if teacher_logits.row_len() != p || teacher_logits.rows() == 0 {
        return Err(Error::Validation("teacher logits do not match the center".into()));
    }
    let n = teacher_logits.rows() as f64;
    for (j, c) in center.iter_mut().enumerate() {
        let mean = (0..teacher_logits.rows()).map(|i| teacher_logits.row(i)[j] as f64).sum::<f64>() / n;
        *c = (m * *c as f64 + (1.0 - m) * mean) as f32;
    }
    Ok(())
}

/// MLP to a bottleneck, L2 normalization, then a bias-free projection to
/// `P` pseudo-classes whose columns are optionally weight-normalized.
#[derive(Clone, Debug)]
pub struct DinoHead {
    mlp: Mlp<f32>,
    last: ParamSet<f32>,
    weight_norm: bool,
}

impl DinoHead {
    pub fn new<R: Rng + ?Sized>(dims: &[usize], out_dim: usize, weight_norm: bool, rng: &mut R) -> Result<Self> {
        if out_dim < 2 {
            return Err(Error::Config("the pseudo-class head needs at least 2 outputs".into()));
        }
        if dims.len() < 2 {
            return Err(Error::Config("the head MLP needs input and bottleneck widths".into()));
        }
        let mlp = Mlp::new(dims, true, rng);
        let bottleneck = *dims.last().expect("checked");
        let mut last = ParamSet::new();
        last.add("last.weight", kaiming_uniform(&[bottleneck, out_dim], bottleneck, rng));
        Ok(DinoHead { mlp, last, weight_norm })
    }

    pub fn out_dim(&self) -> usize {
        self.last.value(0).shape()[1]
    }

    pub fn forward(&self, g: &mut Graph<f32>, x: Var) -> Var {
        let h = self.mlp.forward(g, x);
        let h = g.l2_normalize(h);
        let w = g.param(&self.last, 0);
        let w = if self.weight_norm {
            let wt = g.transpose(w);
            let wt = g.l2_normalize(wt);
            g.transpose(wt)
        } else {
            w
        };
        g.matmul(h, w)
    }

    pub fn param_sets(&self) -> [&ParamSet<f32>; 2] {
        [self.mlp.params(), &self.last]
    }

    pub fn param_sets_mut(&mut self) -> [&mut ParamSet<f32>; 2] {
        [self.mlp.params_mut(), &mut self.last]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DinoConfig {
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
    pub bottleneck: usize,
    pub out_dim: usize,
    pub weight_norm: bool,
    pub student_temperature: f64,
    pub teacher_temperature: f64,
    pub teacher_momentum: f64,
    pub center_momentum: f64,
    /// When false the center stays at zero (sanity probe for collapse).
    pub centering: bool,
    pub optimizer: SgdConfig,
    pub schedule: LrSchedule,
    pub steps: usize,
    pub clip_norm: f64,
    pub views: ViewRecipe,
}

impl Default for DinoConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::tiny_transformer();
        let global = encoder.input_size;
        DinoConfig {
            encoder,
            head_hidden: 256,
            bottleneck: 64,
            out_dim: 1024,
            weight_norm: true,
            student_temperature: 0.1,
            teacher_temperature: 0.04,
            teacher_momentum: 0.996,
            center_momentum: 0.9,
            centering: true,
            optimizer: SgdConfig::default(),
            schedule: LrSchedule::Cosine,
            steps: 2000,
            clip_norm: 3.0,
            views: ViewRecipe::multi_crop(global, global / 2, 4),
        }
    }
}

impl DinoConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.optimizer.validate()?;
        self.views.validate()?;
        if !matches!(self.views, ViewRecipe::MultiCrop { .. }) {
            return Err(Error::Config("self-distillation needs a multi-crop recipe".into()));
        }
        if self.out_dim < 2 {
            return Err(Error::Config("out_dim must be at least 2".into()));
        }
        let (ts, tt) = (self.student_temperature, self.teacher_temperature);
        if !(tt > 0.0 && ts > 0.0 && tt < ts) {
            return Err(Error::Config(format!("need 0 < teacher τ ({tt}) < student τ ({ts})")));
        }
        for m in [self.teacher_momentum, self.center_momentum] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config(format!("momentum {m} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillRecord {
    pub record: StepRecord,
    /// Mean entropy of the teacher distributions this step.
    pub teacher_entropy: f64,
}

pub struct DistillationState {
    pub config: DinoConfig,
    pub student: Encoder<f32>,
    pub student_head: DinoHead,
    pub teacher: Encoder<f32>,
    pub teacher_head: DinoHead,
    pub center: Vec<f32>,
    optimizer: Sgd<f32>,
    step: usize,
    seed: u64,
}

impl DistillationState {
    /// The teacher starts as an exact copy of the student.
    pub fn new(config: DinoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let student = Encoder::new(config.encoder.clone(), seed::derive(seed, "student_encoder", 0))?;
        let dims = [config.encoder.embedding_dim, config.head_hidden, config.bottleneck];
        let head = DinoHead::new(&dims, config.out_dim, config.weight_norm, &mut seed::rng(seed, "dino_head", 0))?;
        let optimizer = Sgd::new(config.optimizer.clone())?;
        Ok(DistillationState {
            center: vec![0.0; config.out_dim],
            teacher: student.clone(),
            teacher_head: head.clone(),
            student,
            student_head: head,
            optimizer,
            config,
            step: 0,
            seed,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// The representation handed to probes.
    pub fn encoder(&self) -> &Encoder<f32> {
        &self.teacher
    }

    pub fn teacher_grads_all_zero(&self) -> bool {
        self.teacher.params().grads_all_zero() && self.teacher_head.param_sets().iter().all(|p| p.grads_all_zero())
    }

    fn student_groups<'a>(student: &'a mut Encoder<f32>, head: &'a mut DinoHead) -> Vec<&'a mut ParamSet<f32>> {
        let [a, b] = head.param_sets_mut();
        vec![student.params_mut(), a, b]
    }

    fn logits(encoder: &Encoder<f32>, head: &DinoHead, g: &mut Graph<f32>, x: Tensor<f32>) -> Result<Var> {
        let xv = g.constant(x);
        let out = encoder.forward(g, xv)?;
        Ok(head.forward(g, out.embedding))
    }

    pub fn distill_step(&mut self, images: &[FloatImage]) -> Result<DistillRecord> {
        let b = images.len();
        let views = batch_views(images, &self.config.views, seed::derive(self.seed, "dino_views", self.step as u64))?;
        let n_global = views[0].global.len();
        let n_local = views[0].local.len();
        let crop = |global: bool, v: usize| -> Result<Tensor<f32>> {
            let imgs: Vec<FloatImage> =
                views.iter().map(|x| if global { x.global[v].clone() } else { x.local[v].clone() }).collect();
            images_to_tensor(&imgs)
        };
        let globals: Vec<Tensor<f32>> = (0..n_global).map(|v| crop(true, v)).collect::<Result<_>>()?;
        let locals: Vec<Tensor<f32>> = (0..n_local).map(|v| crop(false, v)).collect::<Result<_>>()?;

        let mut tg = Graph::inference();
        let all_globals = Tensor::concat_rows(&globals.iter().collect::<Vec<_>>())?;
        let tl = Self::logits(&self.teacher, &self.teacher_head, &mut tg, all_globals)?;
        let teacher_logits = tg.value(tl).clone();
        let teacher_probs: Vec<Tensor<f32>> = (0..n_global)
            .map(|v| {
                teacher_distribution(
                    &teacher_logits.slice_rows(v * b, (v + 1) * b),
                    &self.center,
                    self.config.teacher_temperature,
                )
            })
            .collect::<Result<_>>()?;
        let teacher_entropy = teacher_probs.iter().map(mean_entropy).sum::<f64>() / n_global as f64;

        let mut g = Graph::new();
        let all_globals = Tensor::concat_rows(&globals.iter().collect::<Vec<_>>())?;
        let sg = Self::logits(&self.student, &self.student_head, &mut g, all_globals)?;
        let mut student: Vec<Var> = (0..n_global).map(|v| g.slice_rows(sg, v * b, (v + 1) * b)).collect();
        if n_local > 0 {
            let all_locals = Tensor::concat_rows(&locals.iter().collect::<Vec<_>>())?;
            let sl = Self::logits(&self.student, &self.student_head, &mut g, all_locals)?;
            student.extend((0..n_local).map(|v| g.slice_rows(sl, v * b, (v + 1) * b)));
        }
        let loss = dino_loss(&mut g, &student, &teacher_probs, self.config.student_temperature)?;
        let loss_value = g.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Contract(format!("non-finite loss at step {}", self.step)));
        }
        let grads = g.backward(loss)?;
        for set in Self::student_groups(&mut self.student, &mut self.student_head) {
            set.accumulate(&g, &grads);
        }
        if !self.teacher_grads_all_zero() {
            return Err(Error::Contract("gradient reached the teacher".into()));
        }
        let lr = self.config.schedule.lr_at(self.step, self.config.steps, self.config.optimizer.base_lr);
        let clip = self.config.clip_norm;
        let mut groups = Self::student_groups(&mut self.student, &mut self.student_head);
        let grad_norm = clip_grad_norm(&mut groups, clip);
        self.optimizer.step(&mut groups, lr);

        let m = self.config.teacher_momentum;
        let [th0, th1] = self.teacher_head.param_sets_mut();
        let [sh0, sh1] = self.student_head.param_sets();
        ema_update(&mut [self.teacher.params_mut(), th0, th1], &[self.student.params(), sh0, sh1], m)?;
        if self.config.centering {
            center_update(&mut self.center, &teacher_logits, self.config.center_momentum)?;
        }
        self.step += 1;
        Ok(DistillRecord { record: StepRecord { step: self.step, loss: loss_value, lr, grad_norm }, teacher_entropy })
    }

    /// Parameter sets written to checkpoints: the teacher encoder, then its head.
    pub fn checkpoint_sets(&self) -> Vec<&ParamSet<f32>> {
        let [a, b] = self.teacher_head.param_sets();
        vec![self.teacher.params(), a, b]
    }
}
